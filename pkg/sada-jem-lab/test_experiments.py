"""
桌面规模的端到端实验（pytest -m slow）
玩具混合训练的准确率、模式覆盖与 Fréchet 趋势；生成分支增强消融的方向
"""

import pytest

from app.core.seeds import derive_seeds
from app.models.network import load_checkpoint
from app.schemas.run import build_run_config
from app.services.data_service import parse_data_spec
from app.services.eval_service import feature_frechet
from app.services.sampler_service import fit_informative_init, generate_samples
from app.services.trainer_service import train

pytestmark = pytest.mark.slow

TOY = "toy:gaussians8:n=4096"
IMAGES = "synth:bars:n=1024:size=16:classes=4"


def checkpoint_frechet(path, config, train_ds, test_ds):
    """从检查点跑新链，与留出真实数据比较特征 Fréchet 距离"""
    model = load_checkpoint(path)
    init = fit_informative_init(train_ds, train_ds.class_count, config.train.init_floor)
    sgld = config.train.sgld.model_copy(update={"k": config.eval.sample_k, "clamp_range": train_ds.clamp_range})
    samples = generate_samples(model, init, config.eval.sample_n, sgld, derive_seeds(config.seed).rng("eval"))
    return feature_frechet(model, test_ds, samples)


def toy_hybrid_passes(seed, out):
    config = build_run_config(overrides={
        "data": TOY, "seed": seed, "epochs": 100, "sgld.k": 5, "sgld.step_size": 1.0, "sgld.noise": 0.0,
        "train.reinit_prob": 0.05, "sam.variant": "sam", "sam.rho": 0.2,
        "eval.sample_n": 512, "eval.sample_k": 100,
    })
    train_ds, test_ds = parse_data_spec(config.data), parse_data_spec(config.data, split="test")
    result = train(config, train_ds, test_ds, out)
    first = checkpoint_frechet(result.checkpoints[0], config, train_ds, test_ds)
    last = checkpoint_frechet(result.checkpoints[-1], config, train_ds, test_ds)
    return result.report.accuracy >= 0.95 and result.report.mode_coverage >= 7 and last < first


def test_toy_hybrid_run(tmp_path):
    passed = [toy_hybrid_passes(seed, tmp_path / f"seed{seed}") for seed in range(3)]
    assert sum(passed) >= 2, passed


def augmentation_frechet(seed, augment_gen, out):
    config = build_run_config(overrides={
        "data": IMAGES, "seed": seed, "epochs": 10, "sgld.k": 5, "train.batch_size": 64,
        "train.augment": True, "train.crop_pad": 2, "train.augment_gen": augment_gen,
        "eval.sample_n": 256, "eval.sample_k": 20,
    })
    train_ds, test_ds = parse_data_spec(config.data), parse_data_spec(config.data, split="test")
    return train(config, train_ds, test_ds, out).report.feature_frechet


def test_augmenting_generative_branch_hurts_samples(tmp_path):
    wins = 0
    for seed in range(3):
        both = augmentation_frechet(seed, True, tmp_path / f"both{seed}")
        clean = augmentation_frechet(seed, False, tmp_path / f"clean{seed}")
        wins += both >= clean
    assert wins >= 2
