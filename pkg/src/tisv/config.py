"""Run configuration: sectioned key-value files, flag overrides, canonical hash."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigurationError
from .losses import AdvConfig, TripletConfig
from .network import SeNetConfig
from .optim import SgdConfig
from .trainer import FinetuneConfig, PretrainConfig

SECTIONS = ("run", "synth", "network", "pretrain", "finetune", "split", "eval")

DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0},
    "synth": {},
    "network": {},
    "pretrain": {"epochs": 10, "batch_size": 32, "learning_rate": 0.01, "momentum": 0.9, "weight_decay": 1e-5},
    "finetune": {"epochs": 10, "p": 8, "k": 4, "learning_rate": 0.001, "momentum": 0.9, "weight_decay": 1e-5,
                 "gamma": 0.0, "margin": 0.2, "n_keywords": 2, "routing": "junction", "use_asr_head": True,
                 "lr_patience": 3, "allow_multi_keyword": False},
    "split": {"train_speakers": 8, "eval_speakers": 4},
    "eval": {"m_enroll": 5},
}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except ValueError:
        low = raw.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        return raw.strip()


class RunConfig:
    """Merged configuration (defaults < file < ``--set`` overrides)."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = {s: dict(DEFAULTS.get(s, {})) for s in SECTIONS}
        for sec, kv in (values or {}).items():
            self.section(sec).update(kv)

    def section(self, name: str) -> dict:
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{name}]; expected one of {SECTIONS}")
        return self.values.setdefault(name, {})

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error, UnicodeDecodeError) as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
            for sec in parser.sections():
                for key, raw in parser.items(sec):
                    cfg.section(sec)[key] = _parse_value(raw)
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            sec, dot, name = key.partition(".")
            if not sep or not dot or not name:
                raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
            cfg.section(sec.strip())[name.strip()] = _parse_value(raw)
        return cfg

    @property
    def seed(self) -> int:
        return int(self.values["run"].get("seed", 0))

    def to_dict(self) -> dict:
        return {s: dict(sorted(self.values[s].items())) for s in SECTIONS}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = [f"# config_hash = {self.hash()}"]
        for sec, kv in self.to_dict().items():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {json.dumps(v)}" for k, v in kv.items())
            lines.append("")
        return "\n".join(lines)

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / "run_config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path

    # -- typed views -----------------------------------------------------

    def _pick(self, section: str, cls) -> dict:
        names = {f.name for f in fields(cls)}
        kv = self.values[section]
        unknown = set(kv) - names
        if unknown:
            raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
        return dict(kv)

    def synth_spec(self) -> SynthSpec:
        kv = self._pick("synth", SynthSpec)
        kv.setdefault("seed", self.seed)
        for key in ("f0_range", "tilt_range", "formant_range", "resonance_range"):
            if key in kv:
                kv[key] = tuple(kv[key])
        return SynthSpec(**kv)

    def network(self) -> SeNetConfig:
        cfg = SeNetConfig(**self._pick("network", SeNetConfig))
        cfg.validate()
        return cfg

    def _sgd(self, kv: dict) -> SgdConfig:
        return SgdConfig(kv.pop("learning_rate"), kv.pop("momentum"), kv.pop("weight_decay"))

    def pretrain(self) -> PretrainConfig:
        kv = dict(self.values["pretrain"])
        sgd = self._sgd(kv)
        allowed = {"epochs", "batch_size", "n_speakers"}
        if set(kv) - allowed:
            raise ConfigurationError(f"unknown keys in [pretrain]: {sorted(set(kv) - allowed)}")
        return PretrainConfig(sgd=sgd, seed=self.seed, **kv)

    def finetune(self) -> FinetuneConfig:
        kv = dict(self.values["finetune"])
        sgd = self._sgd(kv)
        trip = TripletConfig(kv.pop("margin"))
        adv = AdvConfig(kv.pop("gamma"))
        kv.pop("keywords", None)
        allowed = {f.name for f in fields(FinetuneConfig)} - {"triplet", "adv", "sgd", "seed"}
        if set(kv) - allowed:
            raise ConfigurationError(f"unknown keys in [finetune]: {sorted(set(kv) - allowed)}")
        return FinetuneConfig(triplet=trip, adv=adv, sgd=sgd, seed=self.seed, **kv)

    def finetune_keywords(self) -> list[str] | None:
        kws = self.values["finetune"].get("keywords")
        if kws is None:
            return None
        if isinstance(kws, str):
            kws = [k.strip() for k in kws.split(",") if k.strip()]
        return sorted(kws)
