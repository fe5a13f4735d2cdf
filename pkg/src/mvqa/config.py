"""Run configuration: one dataclass mirrored by the CLI's JSON config files."""

import dataclasses
import json
from dataclasses import dataclass


class ConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    """Everything a training run needs besides the dataset itself.

    The defaults are full-scale; ``desk_scale()`` shrinks every dimension
    while keeping the architecture's relationships intact, which is what the
    test suite runs.
    """

    seed: int = 0
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.005
    gamma: float = 1.6

    # question side
    n_tokens: int = 12
    embed_dim: int = 300
    state_dim: int = 1024

    # image side
    image_dim: int = 128
    image_channels: int = 1
    maml_layers: int = 4
    maml_channels: int = 64
    cdae_layers: int = 2
    cdae_channels: int = 32
    cdae_height: int = 128
    cdae_width: int = 128

    # attention / fusion / heads
    i2q_hidden: int = 0  # 0 means "use state_dim"
    fused_dim: int = 1024
    fusion_rank: int = 256
    fusion_glimpses: int = 2
    classifier_hidden: int = 1024

    # ablation and behavior switches
    use_i2q_attention: bool = True
    use_iqc_loss: bool = True
    mask_padding: bool = False
    gru_stop_at_length: bool = False
    iqc_detach: str = ""  # "", "visual", or "text"

    # paths
    dataset: str = ""
    out_dir: str = "runs"

    def validate(self):
        positive_dims = (
            "n_tokens", "embed_dim", "state_dim", "image_dim", "image_channels",
            "maml_layers", "maml_channels", "cdae_layers", "cdae_channels",
            "cdae_height", "cdae_width", "fused_dim", "fusion_rank",
            "fusion_glimpses", "classifier_hidden",
        )
        for field in positive_dims:
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be at least 1, got {getattr(self, field)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if self.image_dim % 2:
            raise ConfigError(f"image_dim must be even, got {self.image_dim}")
        if self.iqc_detach not in ("", "visual", "text"):
            raise ConfigError(f"iqc_detach must be '', 'visual', or 'text', got {self.iqc_detach!r}")
        return self

    def desk_scale(self):
        """Same architecture, desk-sized: 8x8 images, two-digit widths."""
        return dataclasses.replace(
            self,
            batch_size=8,
            embed_dim=16,
            state_dim=32,
            image_dim=16,
            maml_layers=2,
            maml_channels=8,
            cdae_layers=1,
            cdae_channels=8,
            cdae_height=8,
            cdae_width=8,
            fused_dim=32,
            fusion_rank=8,
            fusion_glimpses=1,
            classifier_hidden=32,
        )

    @property
    def i2q_hidden_dim(self):
        return self.i2q_hidden if self.i2q_hidden else self.state_dim

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            field = known[key]
            expected = field.type if isinstance(field.type, type) else type(field.default)
            if expected is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, expected):
                raise ConfigError(
                    f"config key {key} expects {expected.__name__}, got {type(value).__name__}")
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
