"""Flat `section.key = value` run configuration with documented defaults.

Precedence: built-in defaults < config file < command-line flags. All
randomness flows from the single `seed` key through named sub-seeds (split,
init, dropout, synth, ...), so stages rerun independently yet reproducibly.
"""

from __future__ import annotations

from dataclasses import dataclass

from oodgate.errors import UserError

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "policy": "fusion_priority",  # gate_priority | fusion_priority
    "work.dir": "work",
    "data.source": "synth",  # synth | dir
    "data.dir": "",
    "data.scheme": "byte_image_32x32",
    "data.ood_families": "",  # dir mode: family names held out as test OOD
    "split.train": "0.7",
    "split.val": "0.1",
    "split.test": "0.2",
    "synth.n_id_families": "5",
    "synth.n_proxy_families": "2",
    "synth.n_ood_families": "2",
    "synth.dim": "16",
    "synth.samples_per_family": "200",
    "synth.centroid_separation": "10.0",
    "synth.intra_family_sigma": "1.0",
    "stage1.hidden": "128,64",
    "stage1.dropout": "0.1",
    "stage1.batchnorm": "1",
    "stage1.optimizer": "adam",
    "stage1.base_lr": "0.01",
    "stage1.lr_schedule": "constant",
    "stage1.lr_decay_factor": "0.1",
    "stage1.lr_decay_every": "10",
    "stage1.epochs": "25",
    "stage1.batch_size": "32",
    "boundary.band": "1.0",
    "boundary.one_sided": "0",
    "boundary.sigma_mode": "per_class",
    "fusion.hidden": "64",
    "fusion.optimizer": "adam",
    "fusion.base_lr": "0.01",
    "fusion.lr_schedule": "constant",
    "fusion.lr_decay_factor": "0.1",
    "fusion.lr_decay_every": "10",
    "fusion.epochs": "25",
    "fusion.batch_size": "32",
    "fusion.proxy_families": "",  # dir mode: family names held aside as OOD proxy
    "metrics.scorer": "gate_z",  # gate_z (-min|z|) | fusion (1 - ood_score)
    "metrics.tpr_target": "0.95",
    "metrics.fpr_target": "0.05",
    "metrics.emit_curves": "0",
}


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UserError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in DEFAULTS:
                raise UserError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = val
    return values


@dataclass
class RunConfig:
    values: dict[str, str]

    @classmethod
    def load(cls, config_path: str | None = None,
             overrides: dict[str, str] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        if config_path:
            values.update(parse_config_file(config_path))
        if overrides:
            for key, val in overrides.items():
                if key not in DEFAULTS:
                    raise UserError(f"unknown config key {key!r}")
                values[key] = val
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.get("policy") not in ("gate_priority", "fusion_priority"):
            raise UserError(f"bad policy {self.get('policy')!r}")
        if self.get("data.source") not in ("synth", "dir"):
            raise UserError(f"bad data.source {self.get('data.source')!r}")
        ratios = self.split_ratios()
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise UserError(f"split ratios must sum to 1, got {ratios}")
        if self.get_float("boundary.band") <= 0:
            raise UserError("boundary.band must be positive")

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise UserError(f"config {key} must be an integer, "
                            f"got {self.values[key]!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise UserError(f"config {key} must be a number, "
                            f"got {self.values[key]!r}") from None

    def get_bool(self, key: str) -> bool:
        val = self.values[key].lower()
        if val in ("1", "true", "yes"):
            return True
        if val in ("0", "false", "no", ""):
            return False
        raise UserError(f"config {key} must be boolean-like, got {val!r}")

    def get_int_list(self, key: str) -> list[int]:
        raw = self.values[key]
        try:
            return [int(x) for x in raw.split(",") if x.strip()]
        except ValueError:
            raise UserError(f"config {key} must be comma-separated integers") from None

    def split_ratios(self) -> tuple[float, float, float]:
        return (self.get_float("split.train"), self.get_float("split.val"),
                self.get_float("split.test"))

    def dump(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"
