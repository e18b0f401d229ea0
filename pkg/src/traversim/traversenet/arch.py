"""Network architecture descriptions, including the seven ablation rows."""

from __future__ import annotations

from dataclasses import asdict, dataclass

IMU_DIM = 13
FEATURE_SETS = {"xyz": 3, "xyz+n": 6, "xyz+c": 4, "xyz+n+c": 7}
FUSIONS = ("none", "direct", "mid")
# column order of the prepared per-point feature block
FEATURE_COLUMNS = {"xyz": [0, 1, 2], "xyz+n": [0, 1, 2, 3, 4, 5], "xyz+c": [0, 1, 2, 6],
                   "xyz+n+c": [0, 1, 2, 3, 4, 5, 6]}


@dataclass(frozen=True)
class ArchConfig:
    point_features: str = "xyz+n"
    # "none" drops the IMU input entirely (point-only rows of the ablation)
    fusion: str = "mid"
    point_mlp_widths: tuple[int, ...] = (64, 128, 256)
    imu_mlp_widths: tuple[int, ...] = (64, 64)
    head_widths: tuple[int, ...] = (128, 64, 1)
    points_per_sample: int = 256

    def __post_init__(self):
        if self.point_features not in FEATURE_SETS:
            raise ValueError(f"unknown point features {self.point_features!r}; choose from {sorted(FEATURE_SETS)}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        for name in ("point_mlp_widths", "imu_mlp_widths", "head_widths"):
            widths = tuple(int(w) for w in getattr(self, name))
            if any(w < 1 for w in widths):
                raise ValueError(f"{name} must be positive, got {widths}")
            object.__setattr__(self, name, widths)
        if not self.point_mlp_widths or not self.head_widths:
            raise ValueError("point and head MLPs need at least one layer")
        if self.fusion == "mid" and not self.imu_mlp_widths:
            raise ValueError("mid fusion needs at least one IMU layer")
        if self.head_widths[-1] != 1:
            raise ValueError("the final head width must be 1")
        if self.points_per_sample < 1:
            raise ValueError("points_per_sample must be positive")

    @property
    def in_features(self) -> int:
        return FEATURE_SETS[self.point_features]

    @property
    def uses_imu(self) -> bool:
        return self.fusion != "none"

    @property
    def head_input(self) -> int:
        pooled = self.point_mlp_widths[-1]
        if self.fusion == "direct":
            return pooled + IMU_DIM
        if self.fusion == "mid":
            return pooled + self.imu_mlp_widths[-1]
        return pooled

    @property
    def label(self) -> str:
        feats = self.point_features.upper()
        if self.fusion == "direct":
            return f"D-F IMU+{feats}"
        if self.fusion == "mid":
            return f"M-F IMU+{feats}"
        return feats

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        fan_in = self.in_features
        for i, w in enumerate(self.point_mlp_widths):
            shapes[f"point.{i}.W"] = (fan_in, w)
            shapes[f"point.{i}.b"] = (w,)
            fan_in = w
        if self.fusion == "mid":
            fan_in = IMU_DIM
            for i, w in enumerate(self.imu_mlp_widths):
                shapes[f"imu.{i}.W"] = (fan_in, w)
                shapes[f"imu.{i}.b"] = (w,)
                fan_in = w
        fan_in = self.head_input
        for i, w in enumerate(self.head_widths):
            shapes[f"head.{i}.W"] = (fan_in, w)
            shapes[f"head.{i}.b"] = (w,)
            fan_in = w
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("point_mlp_widths", "imu_mlp_widths", "head_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ArchConfig:
        return cls(**data)

    @classmethod
    def parse(cls, text: str) -> ArchConfig:
        """Build from a row label (``M-F IMU+XYZ+N``, ``XYZ+C``) or ``fusion:features`` (``mid:xyz+n``)."""
        t = text.strip().lower().replace(" ", "")
        fusion = "none"
        for prefix, name in (("d-fimu+", "direct"), ("m-fimu+", "mid")):
            if t.startswith(prefix):
                fusion, t = name, t[len(prefix):]
        if ":" in t:
            fusion, t = t.split(":", 1)
        if t not in FEATURE_SETS or fusion not in FUSIONS:
            raise ValueError(f"cannot parse architecture {text!r}")
        return cls(point_features=t, fusion=fusion)

ABLATION_ARCHS = (
    ArchConfig("xyz", "none"),
    ArchConfig("xyz+n", "none"),
    ArchConfig("xyz+c", "none"),
    ArchConfig("xyz+n", "direct"),
    ArchConfig("xyz", "mid"),
    ArchConfig("xyz+c", "mid"),
    ArchConfig("xyz+n", "mid"),
)
