"""Run configuration: optimization, architecture, and ablation switches."""

import dataclasses
import json

from .backbone import BackboneConfig
from .errors import ConfigError


@dataclasses.dataclass
class TrainConfig:
    """Everything a training or evaluation run needs to be reproducible.

    The scale flags form a lattice: scale 3 is cropped out of scale 2's
    zoomed view, so use_S3 requires use_S2. fuse_scales selects which scale
    feature vectors feed the fused representation; the empty string means
    every computed scale. Scale gating (use_scale_attention) operates on all
    three scales, so it requires them all computed and fused.
    """

    # optimization
    learning_rate: float = 0.01
    lr_decay: float = 0.1
    batch_size: int = 32
    epochs: int = 12
    seed: int = 0
    # loss shape
    mar: float = 0.05
    slope: float = 10.0
    lambda_p_init: float = 0.5
    # architecture
    image_size: int = 48
    stem_channels: int = 8
    stem_pool: int = 4
    growth_k: int = 4
    depth: int = 6
    bottleneck: int = 8
    pan_hidden: int = 16
    r: int = 4
    l_min: float = 0.1
    l0: float = 0.35
    n_expressions: int = 7
    n_poses: int = 5
    # ablation flags
    use_S2: bool = True
    use_S3: bool = True
    use_scale_attention: bool = True
    use_pose_loss: bool = True
    use_dynamic_weights: bool = True
    use_constraint_factor: bool = True
    use_attention_loss: bool = True
    fuse_scales: str = ""
    # schedule extras
    att_warmup_epochs: int = 0
    s3_noise: bool = False
    # reserved: per-sample task weights are not implemented (weights are
    # computed once per batch); the flag exists so configs can state intent.
    per_sample_weights: bool = False

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lr_decay <= 0:
            raise ConfigError(f"lr_decay must be > 0, got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.mar < 0:
            raise ConfigError(f"mar must be >= 0, got {self.mar}")
        if self.slope <= 0:
            raise ConfigError(f"slope must be > 0, got {self.slope}")
        if not 0.0 < self.lambda_p_init <= 0.5:
            raise ConfigError(
                f"lambda_p_init must be in (0, 0.5], got {self.lambda_p_init}")
        if self.pan_hidden < 1:
            raise ConfigError(f"pan_hidden must be >= 1, got {self.pan_hidden}")
        if self.r < 1:
            raise ConfigError(f"r must be >= 1, got {self.r}")
        if not 0.0 < self.l_min < 0.5:
            raise ConfigError(f"l_min must be in (0, 0.5), got {self.l_min}")
        if not self.l_min <= self.l0 <= 0.5:
            raise ConfigError(
                f"l0 must be in [l_min, 0.5], got {self.l0} with l_min {self.l_min}")
        if self.n_expressions < 2:
            raise ConfigError(f"n_expressions must be >= 2, got {self.n_expressions}")
        if self.n_poses < 2:
            raise ConfigError(f"n_poses must be >= 2, got {self.n_poses}")
        self.backbone().validate()
        if self.use_S3 and not self.use_S2:
            raise ConfigError("use_S3 requires use_S2: scale 3 is cropped "
                              "from scale 2's zoomed view")
        fused = self.fused_scales()
        if self.use_scale_attention and fused != ("1", "2", "3"):
            raise ConfigError("use_scale_attention gates all three scales; "
                              "it needs use_S2, use_S3 and fuse_scales covering 123")
        if self.att_warmup_epochs < 0:
            raise ConfigError(
                f"att_warmup_epochs must be >= 0, got {self.att_warmup_epochs}")
        if self.att_warmup_epochs > 0 and not (self.use_S2 and self.use_attention_loss):
            raise ConfigError("att_warmup_epochs needs attention terms to "
                              "train (use_S2 and use_attention_loss)")
        if self.s3_noise and not self.use_S3:
            raise ConfigError("s3_noise replaces scale 3's input; it needs use_S3")
        if self.per_sample_weights:
            raise ConfigError("per_sample_weights is reserved; only per-batch "
                              "task weights are implemented")
        return self

    def backbone(self):
        return BackboneConfig(image_channels=1, image_size=self.image_size,
                              stem_channels=self.stem_channels,
                              stem_pool=self.stem_pool, growth_k=self.growth_k,
                              depth=self.depth, bottleneck=self.bottleneck)

    def scales(self):
        """Computed scales, in forward order."""
        if self.use_S3:
            return ("1", "2", "3")
        if self.use_S2:
            return ("1", "2")
        return ("1",)

    def fused_scales(self):
        """Scales whose pooled features feed the fused representation."""
        computed = self.scales()
        if not self.fuse_scales:
            return computed
        chosen = tuple(sorted(set(self.fuse_scales)))
        for s in chosen:
            if s not in ("1", "2", "3"):
                raise ConfigError(f"fuse_scales may only name scales 123, "
                                  f"got {self.fuse_scales!r}")
            if s not in computed:
                raise ConfigError(f"fuse_scales names scale {s} but it is "
                                  f"not computed under the current flags")
        return chosen

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data).validate()

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object of field values")
        return cls.from_dict(data)
