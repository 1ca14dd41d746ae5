import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uncertnerf.losses import MODES, LossConfig
from uncertnerf.train import (
    EvalReport,
    Trainer,
    TrainConfig,
    apply_overrides,
    evaluate,
    format_table,
    load_checkpoint,
    nearest_sources,
    normalize_heatmap,
    patch_pixels,
    read_kv_file,
    renderer_from_checkpoint,
    ring_distance,
    robustness_sweep,
    sample_patch_rays,
    source_images_for_level,
    uncertainty_auroc,
)


def test_patch_offsets():
    pix = patch_pixels([10], [10])
    assert sorted(set(pix[0, ..., 0].ravel().tolist())) == [8, 10, 12]
    assert sorted(set(pix[0, ..., 1].ravel().tolist())) == [8, 10, 12]
    assert pix.shape == (1, 3, 3, 2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), H=st.integers(5, 40), W=st.integers(5, 40))
def test_patch_pixels_in_bounds(seed, H, W):
    pix = sample_patch_rays(H, W, 20, np.random.default_rng(seed))
    assert pix[..., 0].min() >= 0 and pix[..., 0].max() <= W - 1
    assert pix[..., 1].min() >= 0 and pix[..., 1].max() <= H - 1


def test_default_batch_is_1017_rays():
    cfg = TrainConfig()
    assert cfg.rays_per_batch == 1017
    pix = sample_patch_rays(64, 96, cfg.n_patches, np.random.default_rng(0))
    assert pix.reshape(-1, 2).shape[0] == 1017


def test_small_image_rejected():
    with pytest.raises(ValueError):
        sample_patch_rays(4, 10, 3, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_source_train=0)
    with pytest.raises(ValueError):
        TrainConfig(n_patches=0)


def test_overrides_and_kv_file(tmp_path):
    f = tmp_path / "cfg.txt"
    f.write_text("# comment\nlr = 0.001\nloss.mode = no_beta\n\nn_patches=7\n")
    cfg = apply_overrides(TrainConfig(), read_kv_file(f))
    assert cfg.lr == 0.001 and cfg.loss.mode == "no_beta" and cfg.n_patches == 7
    assert TrainConfig().loss.mode == "full"
    with pytest.raises(KeyError):
        apply_overrides(TrainConfig(), {"bogus": "1"})
    with pytest.raises(ValueError):
        apply_overrides(TrainConfig(), {"loss.mode": "bogus"})


def test_ring_distance_wraps():
    assert math.isclose(ring_distance(0.1, 2 * math.pi - 0.1), 0.2)


def test_nearest_sources_excludes_target(tiny_dataset):
    src = nearest_sources(tiny_dataset, 0, 3)
    assert 0 not in src and len(src) == 3
    assert set(src[:2]) == {1, 5}
    with pytest.raises(ValueError):
        nearest_sources(tiny_dataset, 0, 6)


def test_zero_iterations_keeps_initialization(tiny_dataset, tiny_config):
    a = Trainer(tiny_config, tiny_dataset)
    b = Trainer(tiny_config, tiny_dataset)
    a.train(0)
    for x, y in zip(a.renderer.state_dict().values(), b.renderer.state_dict().values()):
        assert torch.equal(x, y)


def test_same_seed_identical_logs(tiny_dataset, tiny_config):
    logs = []
    for _ in range(2):
        records = []
        Trainer(tiny_config, tiny_dataset).train(log_fn=records.append)
        logs.append(records)
    assert logs[0] == logs[1]
    assert logs[0][0]["event"] == "train_start" and logs[0][0]["n_source"] == 2


def test_different_seed_differs(tiny_dataset, tiny_config):
    a = Trainer(tiny_config, tiny_dataset).train()
    b = Trainer(dataclasses.replace(tiny_config, seed=1), tiny_dataset).train()
    assert [r["loss"] for r in a] != [r["loss"] for r in b]


def test_checkpoint_resume_matches_uninterrupted(tiny_dataset, tiny_config, tmp_path):
    full = Trainer(tiny_config, tiny_dataset)
    ref = full.train(4)
    part = Trainer(tiny_config, tiny_dataset)
    part.train(2)
    part.save(tmp_path / "ck.pt")
    resumed = Trainer.load(tmp_path / "ck.pt", tiny_dataset)
    rest = resumed.train(2)
    assert [r["loss"] for r in rest] == [r["loss"] for r in ref[2:]]


def test_checkpoint_round_trip_render_bit_exact(tiny_dataset, tiny_config, tmp_path):
    trainer = Trainer(tiny_config, tiny_dataset)
    trainer.train(2)
    before = evaluate(trainer.renderer, tiny_dataset, 3)
    trainer.save(tmp_path / "ck.pt")
    renderer, target_net = renderer_from_checkpoint(load_checkpoint(tmp_path / "ck.pt"))
    after = evaluate(renderer, tiny_dataset, 3)
    assert before.psnr == after.psnr and before.ssim == after.ssim
    assert target_net is not None


def test_load_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")


def test_nan_loss_dumps_batch(tiny_dataset, tiny_config, tmp_path):
    trainer = Trainer(tiny_config, tiny_dataset, out_dir=tmp_path)
    with torch.no_grad():
        trainer.renderer.point_head.color[0].weight.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        trainer.step()
    assert list(tmp_path.glob("nonfinite_batch_*.pt"))


def test_evaluate_report_fields(tiny_dataset, tiny_config):
    trainer = Trainer(tiny_config, tiny_dataset)
    rep = evaluate(trainer.renderer, tiny_dataset, 3, trainer.target_net)
    assert isinstance(rep, EvalReport)
    assert len(rep.psnr) == len(tiny_dataset.eval_indices)
    assert all(math.isfinite(p) for p in rep.psnr)
    assert 0 <= rep.auroc <= 1
    assert "PSNR" in format_table({"full": rep})


def test_random_uncertainty_auroc_is_chance(tiny_dataset):
    class RandomNet(torch.nn.Module):
        def forward(self, image):
            g = torch.Generator().manual_seed(int(image.sum() * 1000) % 2**31)
            return torch.rand(*image.shape[:2], 1, generator=g)

    auroc, _, _ = uncertainty_auroc(RandomNet(), tiny_dataset)
    assert abs(auroc - 0.5) < 0.05


def test_level_zero_sources_are_clean(tiny_dataset):
    target = tiny_dataset.eval_indices[0]
    src = nearest_sources(tiny_dataset, target, 4)
    imgs = source_images_for_level(tiny_dataset, src, 0)
    for k, i in enumerate(src):
        assert np.array_equal(imgs[k].numpy(), tiny_dataset.views[i].clean_image)
    n_dirty = sum(tiny_dataset.views[i].mask.any() for i in src)
    imgs = source_images_for_level(tiny_dataset, src, n_dirty)
    for k, i in enumerate(src):
        assert np.array_equal(imgs[k].numpy(), tiny_dataset.views[i].image)
    with pytest.raises(ValueError):
        source_images_for_level(tiny_dataset, src, n_dirty + 1)


def test_robustness_rows(tiny_dataset, tiny_config):
    trainer = Trainer(tiny_config, tiny_dataset)
    rows = robustness_sweep(trainer.renderer, tiny_dataset, [0, 1], n_source=3)
    assert list(rows) == [0, 1]
    with pytest.raises(ValueError):
        robustness_sweep(trainer.renderer, tiny_dataset, [4], n_source=3)


def test_normalize_heatmap():
    x = np.array([[2.0, 4.0], [3.0, 6.0]])
    h = normalize_heatmap(x)
    assert h.min() == 0 and h.max() == 1
    assert np.all(normalize_heatmap(np.ones((2, 2))) == 0)


def test_ablation_modes_match_table_rows():
    assert MODES == ("no_beta", "beta_s_only", "beta_t_only", "mse_only", "ssim_only", "full")
    a = TrainConfig()
    b = dataclasses.replace(a, loss=dataclasses.replace(a.loss, mode="beta_s_only"))
    diff = {k for k in a.to_dict() if a.to_dict()[k] != b.to_dict()[k]}
    assert diff == {"loss"}
