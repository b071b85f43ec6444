"""Run configuration shared by the CLI, the trainer and checkpoints."""
import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError
from .model import ModelKind
from .optim import OPTIMIZERS

DATASETS = ("cifar10", "cifar100", "synthetic")
INITS = ("xavier", "msr", "orthogonal")

# Fields that describe where things live on this machine, not what was run.
# They are left out of the serialized snapshot so checkpoints are portable.
LOCAL_FIELDS = ("data_path", "out")


@dataclass
class RunConfig:
    command: str = "train"
    arch: str = "tiny"
    kind: str = "rir"
    dataset: str = "cifar10"
    data_path: str | None = None
    subset: int | None = 5000
    subset_seed: int = 0
    test_subset: int | None = None
    epochs: int = 5
    batch_size: int = 100
    opt: str = "sgdm"
    lr: float = 0.1
    momentum: float = 0.9
    l2: float = 1e-4
    center_decay: bool = True
    init: str = "msr"
    seed: int = 0
    augment: bool = True
    out: str = "runs/latest"
    f64: bool = False
    synthetic_train: int = 5000
    synthetic_test: int = 1000

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind).value
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.opt not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.subset is not None and self.subset < 1:
            raise ConfigError("subset size must be positive")

    @property
    def num_classes(self):
        return 100 if self.dataset == "cifar100" else 10

    def snapshot(self):
        d = asdict(self)
        for k in LOCAL_FIELDS:
            d.pop(k)
        return d

    def to_json(self):
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d, **local):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known}, **local)
