"""Line-oriented ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key is one field of the
encoder, the MAE head, the training recipe or the augmentation; unknown keys
are errors so that sweeps cannot silently mistype a setting.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Union

from deskmae import train as TR
from deskmae.data import AugmentSpec
from deskmae.mae import MaeConfig, tiny_desk
from deskmae.vit import ViTConfig


class ConfigError(ValueError):
    pass


ENCODER_KEYS = ("image_size", "patch_size", "channels", "depth", "width", "heads", "mlp_ratio")
MAE_KEYS = ("decoder_depth", "decoder_width", "decoder_heads", "mask_ratio", "sampling", "target_kind",
            "pca_k", "norm_eps", "mask_tokens_in_encoder")
RECIPE_KEYS = ("optimizer", "base_lr", "weight_decay", "beta1", "beta2", "momentum", "eps", "batch_size",
               "warmup_epochs", "total_epochs", "layer_decay", "frozen_blocks", "mlp_only", "label_smoothing",
               "mixup_alpha", "cutmix_alpha", "drop_path_rate", "ema_decay", "augment", "flip", "partial_ft_epochs")
AUG_KEYS = ("scale_min", "scale_max", "ratio_min", "ratio_max", "fixed_fraction")
KEYS = ENCODER_KEYS + MAE_KEYS + RECIPE_KEYS + AUG_KEYS


def default_values(protocol: str = "pretrain", scale: str = "desk") -> dict[str, Any]:
    """Defaults: the Tiny-desk encoder, the standard MAE head and the protocol's recipe."""
    presets = {"desk": TR.DESK_PRESETS, "reference": TR.REFERENCE_PRESETS}.get(scale)
    if presets is None:
        raise ConfigError(f"unknown scale {scale!r}")
    if protocol not in presets:
        raise ConfigError(f"unknown protocol {protocol!r}")
    enc, head, recipe, aug = ViTConfig(), MaeConfig(), presets[protocol], AugmentSpec()
    values = {k: getattr(enc, k) for k in ENCODER_KEYS}
    values.update({k: getattr(head, k) for k in MAE_KEYS})
    values.update({k: getattr(recipe, k) for k in RECIPE_KEYS if hasattr(recipe, k)})
    values.update(beta1=recipe.betas[0], beta2=recipe.betas[1])
    values.update(scale_min=aug.scale_range[0], scale_max=aug.scale_range[1],
                  ratio_min=aug.ratio_range[0], ratio_max=aug.ratio_range[1], fixed_fraction=aug.fixed_fraction)
    return values


def _coerce(raw: str, like: Any, key: str) -> Any:
    text = raw.strip()
    if key == "frozen_blocks":
        return None if text.lower() == "none" else int(text)
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(p) for p in text.split(",") if p.strip())
    return text


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclasses.dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls, protocol: str = "pretrain", scale: str = "desk") -> "RunConfig":
        return cls(default_values(protocol, scale))

    @classmethod
    def parse(cls, text: str, protocol: str = "pretrain", scale: str = "desk", source: str = "<config>") -> "RunConfig":
        values = default_values(protocol, scale)
        seen: dict[str, int] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
            key, raw = (s.strip() for s in body.split("=", 1))
            if key not in values:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"{source}:{lineno}: {key!r} already set on line {seen[key]}")
            try:
                values[key] = _coerce(raw, values[key], key)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
            seen[key] = lineno
        out = cls(values)
        try:
            out.mae_config(), out.recipe(), out.augment_spec()
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from None
        return out

    @classmethod
    def load(cls, path: Union[str, Path], protocol: str = "pretrain", scale: str = "desk") -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, protocol, scale, str(path))

    def dump(self, keys: tuple = KEYS) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in keys)

    def update(self, **overrides) -> "RunConfig":
        """Apply command-line overrides; ``None`` values are skipped."""
        values = dict(self.values)
        for k, v in overrides.items():
            if v is None:
                continue
            if k not in values:
                raise ConfigError(f"unknown key {k!r}")
            values[k] = v
        out = RunConfig(values)
        try:
            out.mae_config(), out.recipe()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return out

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def encoder(self) -> ViTConfig:
        return ViTConfig(**{k: self.values[k] for k in ENCODER_KEYS})

    def mae_config(self) -> MaeConfig:
        return MaeConfig(encoder=self.encoder(), **{k: self.values[k] for k in MAE_KEYS})

    def recipe(self) -> TR.TrainRecipe:
        v = self.values
        fields = {k: v[k] for k in RECIPE_KEYS if k not in ("beta1", "beta2")}
        return TR.TrainRecipe(betas=(v["beta1"], v["beta2"]), **fields)

    def augment_spec(self) -> AugmentSpec:
        v = self.values
        return AugmentSpec(mode=v["augment"], flip=v["flip"], out_size=v["image_size"],
                           scale_range=(v["scale_min"], v["scale_max"]),
                           ratio_range=(v["ratio_min"], v["ratio_max"]), fixed_fraction=v["fixed_fraction"])


def shipped_config(protocol: str, scale: str = "reference") -> Path:
    """Path of the default config file installed with the package."""
    path = Path(__file__).with_name("configs") / scale / f"{protocol}.conf"
    if not path.exists():
        raise ConfigError(f"no shipped config for {protocol!r} at {scale!r} scale")
    return path


def write_shipped_configs(root: Path) -> None:
    for scale in ("reference", "desk"):
        (root / scale).mkdir(parents=True, exist_ok=True)
        for protocol in TR.PROTOCOLS:
            cfg = RunConfig.defaults(protocol, scale)
            if scale == "desk":
                # the small decoder the desk runs were tuned with
                head = tiny_desk()
                cfg = cfg.update(**{k: getattr(head, k) for k in ("decoder_depth", "decoder_width", "decoder_heads")})
            text = f"# {protocol} defaults, {scale} scale\n" + cfg.dump()
            (root / scale / f"{protocol}.conf").write_text(text, encoding="utf-8")
