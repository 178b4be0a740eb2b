"""Return-conditioned transformer policies: offline pretraining and
online reinforcement-learning finetuning on toy control tasks."""

from .ablate import (
    ABLATION_PRESETS,
    iterations_to_threshold,
    preset_variants,
    relabel_instability_report,
    run_ablation,
)
from .checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, config_hash, load_config, parse_config, save_config
from .datasets import dataset_digest, load_dataset, save_dataset, spec_hash
from .dual import EntropyDual, update_dual
from .envs import (
    Env,
    EnvSpec,
    EnvState,
    StepResult,
    calibrate_refs,
    generate_offline_dataset,
    make_env,
    normalized_score,
    scripted_policy,
)
from .gaussian import (
    GaussianDist,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
)
from .gradcheck import grad_check
from .grpo import (
    GrpoConfig,
    generate_group,
    group_advantages,
    grpo_dt_train,
    grpo_loss,
    importance_ratio,
    maybe_update_reference,
    ratio,
    reset_point_probs,
    rollout_full,
    sample_reset_points,
)
from .metrics import file_digest, init_run_dir, read_metrics, write_metrics
from .nets import DTConfig, DTPolicy, QMLP, TwinQ, ValueMLP, contexts_forward
from .ppo import PpoConfig, gae, normalize_batch_advantages, ppo_dt_train, ppo_loss
from .presets import preset_config
from .pretrain import PretrainConfig, evaluate, pretrain_dt
from .qguided import QguidedConfig, q_group_advantages, qguided_train, td3_update
from .seeding import child_seed, rng
from .svgplot import SeriesGroup, line_chart, plot_metrics
from .trajectory import (
    Context,
    SubTrajBuffer,
    SubTrajRecord,
    TrajBuffer,
    Trajectory,
    compute_rtg,
    relabel_hindsight,
    rollout_rtg_update,
    sample_subtrajectories,
    sample_trajectories,
    window,
)

__version__ = "0.1.0"
