from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

# GNN 结构预设: desk 为桌面规模, paper 为完整规模
GNN_PRESETS = {
    "desk": {"hidden_dims": (8, 8, 8), "heads": 2, "dense_hidden": 16},
    "paper": {"hidden_dims": (1024, 512, 256), "heads": 2, "dense_hidden": 64},
}

TRAIN_MODES = ("self", "semi", "e2e")
EVAL_MODELS = ("self", "semi", "untuned", "e2e")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Section):
    unlimited_rate_pu: float = Field(50.0, gt=0, description="rateA=0 的线路使用的替代限值(p.u.)")
    ramp_fraction: float = Field(1.0, ge=0, description="缺失爬坡数据时 r = ramp_fraction * p_max")
    short_term_rating_factor: float = Field(1.0, gt=0, description="故障后线路限值倍数")


class SolverConfig(_Section):
    tol: float = Field(1e-8, gt=0, description="KKT 残差容差")
    max_iter: int = Field(100, ge=1, description="内点法最大迭代次数")


class GnnConfig(_Section):
    preset: Literal["desk", "paper"] = Field("desk", description="结构预设")
    hidden_dims: tuple[int, ...] | None = Field(None, description="每个头的图层宽度, 覆盖预设")
    heads: int | None = Field(None, ge=1, description="注意力头数, 覆盖预设")
    dense_hidden: int | None = Field(None, ge=1, description="全连接隐藏层宽度, 覆盖预设")
    leaky_relu_slope: float = Field(0.2, ge=0, lt=1, description="LeakyReLU 斜率")

    @field_validator("hidden_dims")
    @classmethod
    def _positive_dims(cls, value):
        if value is not None and (not value or any(int(v) < 1 for v in value)):
            raise ValueError("hidden_dims must be a non-empty list of positive integers")
        return value

    def resolved(self) -> dict:
        dims = dict(GNN_PRESETS[self.preset])
        if self.hidden_dims is not None:
            dims["hidden_dims"] = tuple(int(v) for v in self.hidden_dims)
        if self.heads is not None:
            dims["heads"] = int(self.heads)
        if self.dense_hidden is not None:
            dims["dense_hidden"] = int(self.dense_hidden)
        dims["leaky_relu_slope"] = float(self.leaky_relu_slope)
        return dims


class TrainConfig(_Section):
    seed: int | None = Field(None, description="训练随机种子, 缺省时继承 RunConfig.seed")
    n_samples: int = Field(25, ge=1, description="训练样本数")
    demand_range: float = Field(0.30, gt=0, lt=1, description="负荷扰动幅度 ±range")
    contingency_fraction: float = Field(0.20, gt=0, le=1, description="保留的最严重故障比例")
    rho: float = Field(1e4, ge=0, description="切负荷惩罚 $/p.u.")
    lr: float = Field(1e-6, gt=0, description="AdamW 学习率")
    adamw_betas: tuple[float, float] = Field((0.9, 0.999), description="AdamW betas")
    adamw_eps: float = Field(1e-8, gt=0, description="AdamW eps")
    weight_decay: float = Field(1e-4, ge=0, description="解耦权重衰减")
    epochs: int = Field(200, ge=1, description="训练轮数")
    mode: Literal["self", "semi", "e2e"] = Field("self", description="训练模式")
    gnn: GnnConfig = Field(default_factory=GnnConfig)
    batch_size: int = Field(1, ge=1, description="每次更新平均的样本数")
    n_validation: int = Field(0, ge=0, description="验证样本数, 0 表示不做验证")
    validation_seed: int | None = Field(None, description="验证集种子, 缺省为 seed + 1")
    labels_path: str | None = Field(None, description="带标签的数据集 CSV")

    @field_validator("adamw_betas")
    @classmethod
    def _betas_in_range(cls, value):
        if not all(0.0 <= float(b) < 1.0 for b in value):
            raise ValueError("adamw_betas entries must lie in [0, 1)")
        return value


class EvalConfig(_Section):
    n_samples: int = Field(100, ge=1, description="评估样本数")
    seed: int | None = Field(None, description="评估种子, 缺省为 RunConfig.seed + 1000")
    models: tuple[Literal["self", "semi", "untuned", "e2e"], ...] = Field(EVAL_MODELS, description="参与评估的模型")
    sample_counts: tuple[int, ...] = Field((1, 10, 25), description="数据效率实验的样本数")
    checkpoint_dir: str | None = Field(None, description="已训练模型目录 (eval 命令)")


class RunConfig(_Section):
    case_path: str = Field(..., description="MATPOWER 算例路径或内置算例名")
    seed: int = Field(..., description="全局随机种子")
    contingency_fraction: float = Field(0.20, gt=0, le=1, description="保留的最严重故障比例")
    max_contingencies: int | None = Field(None, ge=1, description="故障集规模上限")
    rho: float = Field(1e4, ge=0, description="切负荷惩罚 $/p.u.")
    output_dir: str = Field("out", description="输出目录")
    workers: int = Field(1, ge=1, description="并发求解线程数")
    grid: GridConfig = Field(default_factory=GridConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def train_settings(self) -> TrainConfig:
        """TrainConfig with run-level seed, rho and contingency fraction applied."""
        return self.train.model_copy(
            update={
                "seed": self.seed if self.train.seed is None else self.train.seed,
                "rho": self.rho,
                "contingency_fraction": self.contingency_fraction,
            }
        )

    def eval_seed(self) -> int:
        return self.seed + 1000 if self.eval.seed is None else self.eval.seed


# reproduce 命令的规模预设
REPRODUCE_PRESETS = {
    "desk3": {
        "case_path": "case3_ramp",
        "contingency_fraction": 1.0,
        "rho": 1e4,
        "train": {"n_samples": 25, "n_validation": 10, "epochs": 200, "lr": 1e-2, "gnn": {"preset": "desk"}},
        "eval": {"n_samples": 25, "sample_counts": [1, 10, 25]},
    },
    "desk57": {
        "contingency_fraction": 0.2,
        "max_contingencies": 16,
        "rho": 1e4,
        "train": {"n_samples": 25, "n_validation": 10, "epochs": 100, "lr": 1e-3, "gnn": {"preset": "desk"}},
        "eval": {"n_samples": 100, "sample_counts": [1, 10, 25]},
    },
    "paper": {
        "contingency_fraction": 0.2,
        "rho": 1e4,
        "train": {"n_samples": 100, "n_validation": 100, "epochs": 200, "lr": 1e-6, "gnn": {"preset": "paper"}},
        "eval": {"n_samples": 100, "sample_counts": [1, 10, 25, 100]},
    },
}
