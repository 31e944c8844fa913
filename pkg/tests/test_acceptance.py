"""Acceptance gate: one test per release criterion, each printing PASS/FAIL.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete.
"""

import itertools
import os
import time
from contextlib import contextmanager

import numpy as np

from oodgate import boundary as bd
from oodgate import dataset as ds
from oodgate import metrics as mt
from oodgate import nncore as nn
from oodgate.cli import main as cli_main


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL")
        raise
    print(f"ACCEPTANCE {name}: PASS")


def test_gradient_fidelity():
    with criterion("gradient-fidelity"):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((16, 8))
        y = rng.integers(0, 4, 16)
        start = time.monotonic()
        for rate in (0.0, 0.5):
            model = nn.init_model(
                nn.MlpConfig([8, 16, 8, 4], dropout_rate=rate, use_batchnorm=True),
                seed=3)
            err = nn.grad_check(model, X, y, epsilon=1e-5, dropout_seed=11)
            assert err < 1e-4, f"dropout={rate}: max relative error {err}"
        assert time.monotonic() - start < 10.0


def test_density_normalization():
    with criterion("density-normalization"):
        b1 = bd.ClassBoundary(class_id=0, centroid=np.array([0.0]), sigma_iso=1.0,
                              dist_mean=1.0, dist_std=0.5, n_samples=2)
        mode = bd.gaussian_density(np.array([0.0]), b1)
        assert abs(mode - 1 / np.sqrt(2 * np.pi)) < 1e-9

        sigma = 1.3
        b2 = bd.ClassBoundary(class_id=0, centroid=np.array([0.5, -0.3]),
                              sigma_iso=sigma, dist_mean=1.0, dist_std=0.5,
                              n_samples=2)
        grid = np.linspace(-8 * sigma, 8 * sigma, 401)
        h = grid[1] - grid[0]
        xs, ys = np.meshgrid(b2.centroid[0] + grid, b2.centroid[1] + grid,
                             indexing="ij")
        sq = (xs - b2.centroid[0]) ** 2 + (ys - b2.centroid[1]) ** 2
        vals = np.exp(-sq / (2 * sigma ** 2)) / (2 * np.pi * sigma ** 2)
        # sanity: grid formula agrees with the implementation pointwise
        assert abs(vals[200, 200] - bd.gaussian_density(b2.centroid, b2)) < 1e-12
        integral = vals.sum() * h * h
        assert 0.98 <= integral <= 1.02


def test_boundary_recovery():
    with criterion("boundary-recovery"):
        start = time.monotonic()
        d, n, sigma = 16, 500, 2.3
        rng = np.random.default_rng(7)
        center = rng.standard_normal(d)
        E = center + sigma * rng.standard_normal((n, d))
        bset = bd.fit_boundaries(E, np.zeros(n, dtype=int))
        b = bset.boundaries[0]
        assert abs(b.sigma_iso / sigma - 1) < 0.05
        chi_mean = sigma * np.sqrt(d - 0.5)
        assert abs(b.dist_mean / chi_mean - 1) < 0.05
        assert time.monotonic() - start < 5.0


def test_gate_separability():
    with criterion("gate-separability"):
        start = time.monotonic()
        spec = ds.SynthSpec(n_families=7, dim=16, samples_per_family=200,
                            centroid_separation=10, intra_family_sigma=1.0,
                            n_ood_families=2)
        res = ds.generate_synthetic(spec, 0)
        manifest = ds.split_dataset(res.manifest, (0.7, 0.1, 0.2), seed=0)
        feats = {s.id: f for s, f in zip(manifest.samples, res.features)}
        fam_idx = {f: k for k, f in enumerate(manifest.families)}

        train = [s for s in manifest.samples
                 if s.split == "train" and s.family in fam_idx]
        X_tr = np.vstack([feats[s.id] for s in train])
        y_tr = np.array([fam_idx[s.family] for s in train])
        val = [s for s in manifest.samples
               if s.split == "val" and s.family in fam_idx]
        X_va = np.vstack([feats[s.id] for s in val])
        y_va = np.array([fam_idx[s.family] for s in val])

        model = nn.init_model(nn.MlpConfig([16, 128, 64, 5], dropout_rate=0.1,
                                           use_batchnorm=True), 1)
        model, _ = nn.train(model, X_tr, y_tr, X_va, y_va,
                            nn.TrainConfig(epochs=25, base_lr=0.01, seed=2))
        bset = bd.fit_boundaries(nn.embed(model, X_tr), y_tr)

        test = [s for s in manifest.samples if s.split == "test"]
        scored = []
        for s in test:
            verdict = bd.classify_sample(nn.embed(model, feats[s.id]), bset)
            is_id = s.family in fam_idx
            scored.append(mt.ScoredSample(
                id=s.id, score=-verdict.min_abs_z, is_id=is_id,
                predicted=(5 if verdict.decision == "out_of_distribution"
                           else verdict.nearest_class),
                true_family=s.family))

        # brute-force pairwise AUROC oracle
        pos = [s.score for s in scored if s.is_id]
        neg = [s.score for s in scored if not s.is_id]
        total = sum(1.0 if p > q else 0.5 if p == q else 0.0
                    for p in pos for q in neg)
        auc = total / (len(pos) * len(neg))
        assert auc >= 0.95, f"gate AUROC {auc}"
        recall = mt.ar_ood(scored, n_classes=5)
        assert recall >= 0.90, f"AR-OOD {recall}"
        assert time.monotonic() - start < 30.0


def test_metric_oracle_equivalence():
    with criterion("metric-oracle-equivalence"):
        from test_metrics import (ap_pr_oracle, auroc_pair_oracle,
                                  fpr_sweep_oracle, random_samples)
        for seed in range(20):
            samples = random_samples(seed, n=100)
            assert abs(mt.auroc(samples) - auroc_pair_oracle(samples)) < 1e-12
            assert abs(mt.average_precision(samples, "id")
                       - ap_pr_oracle(samples, "id")) < 1e-12
            assert abs(mt.average_precision(samples, "ood")
                       - ap_pr_oracle(samples, "ood")) < 1e-12
            assert abs(mt.fpr_at_tpr(samples, 0.95)
                       - fpr_sweep_oracle(samples, 0.95)) < 1e-12


def test_end_to_end_pipeline(tmp_path):
    with criterion("end-to-end-pipeline"):
        start = time.monotonic()
        reports = []
        for name in ("a", "b"):
            work = str(tmp_path / name)
            assert cli_main(["pipeline", "--work-dir", work, "--seed", "0"]) == 0
            reports.append(open(os.path.join(work, "metrics_report.txt"),
                                "rb").read())
        assert reports[0] == reports[1], "reruns not byte-identical"
        acc_line = [ln for ln in reports[0].decode().splitlines()
                    if ln.startswith("acc = ")][0]
        acc = float(acc_line.split("=")[1])
        assert acc >= 0.90, f"(K+1)-way test accuracy {acc}"
        assert time.monotonic() - start < 300.0


def test_laplacian_correctness():
    with criterion("laplacian-correctness"):
        two_node = bd.normalized_laplacian(np.array([[0, 1], [1, 0]]))
        assert np.array_equal(two_node, np.array([[1.0, -1.0], [-1.0, 1.0]]))
        for n in range(1, 6):
            pairs = list(itertools.combinations(range(n), 2))
            for bits in itertools.product([0, 1], repeat=len(pairs)):
                A = np.zeros((n, n))
                for (u, v), bit in zip(pairs, bits):
                    A[u, v] = A[v, u] = bit
                L = bd.normalized_laplacian(A)
                assert np.array_equal(L, L.T)
                eig = np.linalg.eigvalsh(L)
                assert eig.min() >= -1e-9
                assert eig.max() <= 2 + 1e-9


def test_eval_mode_batch_invariance():
    with criterion("eval-batch-invariance"):
        model = nn.init_model(nn.MlpConfig([8, 16, 8, 4], dropout_rate=0.2,
                                           use_batchnorm=True), 5)
        rng = np.random.default_rng(3)
        nn.forward(model, rng.standard_normal((128, 8)), mode="train",
                   seed=1, update_stats=True)  # move running stats off init
        X = rng.standard_normal((64, 8))
        batch_logits, _ = nn.forward(model, X, mode="eval")
        for i in range(64):
            solo, _ = nn.forward(model, X[i], mode="eval")
            assert np.max(np.abs(solo[0] - batch_logits[i])) <= 1e-12


def test_literal_rule_fidelity():
    with criterion("literal-rule-fidelity"):
        from test_boundary import _boundaries_with_z, direct_band_rule
        rng = np.random.default_rng(17)
        for _ in range(1000):
            z = rng.uniform(-4, 4, size=int(rng.integers(1, 8)))
            verdict = bd.classify_sample(np.zeros(2), _boundaries_with_z(z))
            assert verdict.decision == direct_band_rule(verdict.z_scores, band=1.0)
