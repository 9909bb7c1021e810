import dataclasses
import math

import numpy as np
import pytest
import torch

from poregan.cgan import (ConditionalGAN, Discriminator, DiscriminatorSpec, GanTrainConfig,
                          Generator, GeneratorSpec, assemble_discriminator_input,
                          assemble_generator_input, count_parameters, discriminator_loss,
                          generator_loss, lr_schedule, parameter_count, preset, read_condition)
from poregan.cgan.losses import generator_loss_from_logits
from poregan.core import ConditionVector, DepthLabel, DivergenceError, StateError, ValidationError


def tiny_specs(n_depths=2, batch_norm=True):
    g = GeneratorSpec(dense_channels=8, base_size=6, blocks=[(8, 3, 2), (3, 3, 2)],
                      n_depths=n_depths, batch_norm=batch_norm, name="tiny")
    d = DiscriminatorSpec(image_size=24, filters=[8, 8], kernels=[3, 3], n_depths=n_depths,
                          name="tiny")
    return g, d


def tiny_data(rng, n=32, size=24):
    imgs = rng.uniform(-1, 1, (n, size, size, 3)).astype(np.float32)
    phi = rng.uniform(0.1, 0.3, n)
    dep = np.arange(n) % 2
    return imgs, phi, dep


# ---------------------------------------------------------------------------
# conditioning


@pytest.mark.parametrize("arch,channels", [("original", 517), ("modelA", 389), ("modelB", 261)])
def test_generator_input_channels(arch, channels):
    g, _ = preset(arch)
    assert g.input_channels == channels
    assert g.output_size == 480


def test_generator_input_block_and_condition_recovery():
    g, _ = preset("original")
    gen = Generator(g)
    c = ConditionVector(0.1573, DepthLabel(2, 4))
    z = np.random.default_rng(0).random(100)
    block = assemble_generator_input(z, c, gen)
    assert block.shape == (30, 30, 517)
    cond = block[..., -5:]
    assert np.all(cond.max(axis=(0, 1)) - cond.min(axis=(0, 1)) == 0)
    back = read_condition(block, 4)
    assert back.depth.index == 2
    assert back.porosity == pytest.approx(0.1573, abs=1e-7)   # float32 planes
    with pytest.raises(ValidationError):
        assemble_generator_input(np.zeros(99), c, gen)


def test_discriminator_input():
    c = ConditionVector(0.25, DepthLabel(1, 4))
    img = np.random.default_rng(1).uniform(-1, 1, (480, 480, 3))
    x = assemble_discriminator_input(img, c)
    assert x.shape == (480, 480, 8)
    assert np.all(x[..., 7] == np.float32(0.25))
    assert np.array_equal(x[..., 3:7], np.broadcast_to([0, 1, 0, 0], (480, 480, 4)))
    assert np.allclose(x[..., :3], img, atol=1e-7)
    with pytest.raises(ValidationError):
        assemble_discriminator_input(np.zeros((96, 96, 4)), c)
    with pytest.raises(ValidationError):
        assemble_discriminator_input(np.full((8, 8, 3), 2.0), c)


def test_discriminator_rejects_wrong_size():
    _, d = tiny_specs()
    with pytest.raises(ValidationError):
        Discriminator(d)(torch.zeros(1, 3, 20, 20), torch.zeros(1), torch.zeros(1, 2))


@pytest.mark.parametrize("arch,expected", [("original", 50e6), ("modelA", 38e6),
                                           ("modelB", 25e6)])
def test_parameter_bands(arch, expected):
    g, d = preset(arch)
    n = parameter_count(g, d)
    assert abs(n / expected - 1) <= 0.2


def test_parameter_count_matches_modules():
    for arch in ("original", "modelA", "modelB"):
        g, d = preset(arch, n_depths=2, toy=True)
        for bn in (False, True):
            g.batch_norm = bn
            assert parameter_count(g, d) == count_parameters(Generator(g)) + \
                count_parameters(Discriminator(d))


def test_toy_preset():
    for arch in ("original", "modelA", "modelB"):
        g, d = preset(arch, 2, toy=True)
        assert g.output_size == d.image_size == 96 and g.base_size == 6


# ---------------------------------------------------------------------------
# losses and schedule


def test_discriminator_loss_values():
    assert discriminator_loss([1 - 1e-7] * 4, [1e-7] * 4) <= 1e-5
    assert discriminator_loss([0.5] * 4, [0.5] * 4) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert discriminator_loss([1e-7], [0.5]) >= 15
    with pytest.raises(ValidationError):
        discriminator_loss([], [0.5])


def test_generator_loss_values():
    assert generator_loss([1 - 1e-7]) <= 1e-6
    assert generator_loss([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    assert generator_loss([math.exp(-1)]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValidationError):
        generator_loss([])


def test_minmax_value_at_chance():
    # with D == 1/2 everywhere the value function is -2 ln 2, so the
    # discriminator loss is 2 ln 2 and each generator term ln 2
    d, g = discriminator_loss([0.5], [0.5]), generator_loss([0.5])
    assert d == pytest.approx(2 * g, abs=1e-12)


def test_lr_schedule():
    c = GanTrainConfig()
    assert lr_schedule(0, c) == pytest.approx(2e-4, rel=1e-12)
    assert lr_schedule(200, c) == pytest.approx(2e-6, rel=1e-12)
    assert lr_schedule(100, c) == pytest.approx(1.01e-4, rel=1e-12)
    lrs = [lr_schedule(e, c) for e in range(201)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValidationError):
        lr_schedule(201, c)


def test_config_validation():
    with pytest.raises(ValidationError):
        GanTrainConfig(batch_size=15)
    with pytest.raises(ValidationError):
        GanTrainConfig(lr_start=1e-6, lr_end=1e-5)


def test_generator_gradient_matches_finite_differences():
    torch.manual_seed(0)
    g = GeneratorSpec(latent_dim=10, dense_channels=8, base_size=6, blocks=[(3, 3, 1)],
                      n_depths=2, name="mini")
    d = DiscriminatorSpec(image_size=6, filters=[4], kernels=[3], n_depths=2, dropout=0.0)
    G, D = Generator(g).double(), Discriminator(d).double().eval()
    for p in G.parameters():
        p.data.normal_(0, 0.3)
    z = torch.rand(4, 10, dtype=torch.float64)
    phi = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
    oh = torch.nn.functional.one_hot(torch.tensor([0, 1, 0, 1]), 2).double()

    def loss():
        return generator_loss_from_logits(D(G(z, phi, oh), phi, oh))

    G.zero_grad()
    loss().backward()
    params = list(G.parameters())
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(20):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-6) + 1e-9


# ---------------------------------------------------------------------------
# training


def test_batch_composition(rng):
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=16, epochs=1))
    d_sizes, g_sizes = [], []
    model.D.register_forward_hook(lambda m, i, o: d_sizes.append(i[0].shape[0]))
    model.G.register_forward_hook(lambda m, i, o: g_sizes.append(i[0].shape[0]))
    imgs, phi, dep = tiny_data(rng, 8)
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2)
    pool = (torch.as_tensor(phi, dtype=torch.float32), torch.as_tensor(dep))
    model.train_step(x, pool[0], pool[1], pool)
    assert d_sizes == [8, 8, 16]
    assert g_sizes == [8, 16]


def _step_losses(seed, rng_data):
    imgs, phi, dep = rng_data
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=8, epochs=1, seed=seed))
    x = torch.from_numpy(imgs[:4]).permute(0, 3, 1, 2).contiguous()
    pool = (torch.as_tensor(phi, dtype=torch.float32), torch.as_tensor(dep))
    return model.train_step(x, pool[0][:4], pool[1][:4], pool)


def test_single_step_deterministic(rng):
    data = tiny_data(rng)
    assert _step_losses(3, data) == _step_losses(3, data)


def test_hundred_steps_finite(rng):
    imgs, phi, dep = tiny_data(rng, 400)
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=8, epochs=1))
    log = model.fit(imgs, phi, dep)
    assert model.step_count == 100
    assert len(log) == 1
    assert all(math.isfinite(v) for v in (log.rows[0]["loss_d"], log.rows[0]["loss_g"]))


def test_divergence_error(rng):
    imgs, phi, dep = tiny_data(rng, 16)
    imgs[:] = np.nan
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=8, epochs=1))
    with pytest.raises(DivergenceError) as err:
        model.fit(imgs, phi, dep)
    assert err.value.step == 1


def test_fit_validation(rng):
    imgs, phi, dep = tiny_data(rng, 16)
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=8, epochs=1))
    with pytest.raises(ValidationError):
        model.fit(imgs, phi[:-1], dep)
    with pytest.raises(ValidationError):
        model.fit(imgs, phi, dep + 5)
    with pytest.raises(ValidationError):
        model.fit(imgs[:, :20, :20], phi, dep)


def test_resume_reproduces_losses(rng, tmp_path):
    imgs, phi, dep = tiny_data(rng, 48)
    g, d = tiny_specs()
    cfg = GanTrainConfig(batch_size=8, epochs=3, seed=11)
    straight = ConditionalGAN(g, d, cfg)
    straight.fit(imgs, phi, dep)

    first = ConditionalGAN(g, d, cfg)
    first.fit(imgs, phi, dep, epochs=1)
    first.save(tmp_path / "ck.pt")
    resumed = ConditionalGAN.load(tmp_path / "ck.pt")
    resumed.fit(imgs, phi, dep)
    assert len(resumed.log) == 3
    for a, b in zip(straight.log.rows, resumed.log.rows):
        assert (a["loss_d"], a["loss_g"], a["lr"]) == (b["loss_d"], b["loss_g"], b["lr"])


def test_checkpoints_written(rng, tmp_path):
    imgs, phi, dep = tiny_data(rng, 32)
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=8, epochs=2, checkpoint_every=1,
                                                probes_per_depth=2))
    model.fit(imgs, phi, dep, porosity_fn=lambda im: float((im[..., 2] > 0).mean()),
              checkpoint_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"last.pt", "best.pt", "epoch_0001.pt", "epoch_0002.pt"} <= names
    assert "probe_error" in model.log.rows[-1]


def test_best_checkpoint_is_highest_probe_r2(rng, tmp_path):
    imgs, phi, dep = tiny_data(rng, 32)
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=8, epochs=3, probes_per_depth=3))
    # default probes: three evenly spaced interior targets per depth, depth 0 first
    grid = []
    for k in (0, 1):
        sel = phi[dep == k]
        grid += list(np.linspace(sel.min(), sel.max(), 5)[1:-1])
    calls = []

    def fake_porosity(im):
        epoch, i = divmod(len(calls), len(grid))
        calls.append(1)
        return grid[i] if epoch == 1 else 0.2      # exact only in the second epoch

    model.fit(imgs, phi, dep, porosity_fn=fake_porosity, checkpoint_dir=tmp_path)
    r2 = [row["probe_r2"] for row in model.log.rows]
    assert r2[1] == pytest.approx(1.0) and r2[0] < 1 and r2[2] < 1
    best = ConditionalGAN.load(tmp_path / "best.pt")
    assert best.epoch == 2 and best.best_probe_score == pytest.approx(-1.0)


# ---------------------------------------------------------------------------
# generation


@pytest.fixture(scope="module")
def trained_tiny():
    rng = np.random.default_rng(0)
    imgs, phi, dep = tiny_data(rng, 16)
    g, d = tiny_specs()
    model = ConditionalGAN(g, d, GanTrainConfig(batch_size=8, epochs=1))
    model.fit(imgs, phi, dep)
    return model


def test_generate_shapes_and_determinism(trained_tiny):
    a = trained_tiny.generate(0.2, 0, 100, seed=5)
    assert a.images.shape == (100, 24, 24, 3) and not a.out_of_range
    assert a.images.min() >= -1 and a.images.max() <= 1
    b = trained_tiny.generate(0.2, 0, 100, seed=5)
    assert np.array_equal(a.images, b.images)
    c = trained_tiny.generate(0.2, DepthLabel(0, 2), 2, seed=6)
    assert not np.array_equal(a.images[:2], c.images)


def test_generate_out_of_range_flag(trained_tiny):
    assert trained_tiny.generate(0.9, 1, 2).out_of_range
    trained_tiny.excluded_ranges[0] = [(0.15, 0.2)]
    try:
        assert trained_tiny.generate(0.17, 0, 1).out_of_range
        assert not trained_tiny.generate(0.25, 0, 1).out_of_range
    finally:
        trained_tiny.excluded_ranges.clear()
    with pytest.raises(ValidationError):
        trained_tiny.generate(0.2, 2)


def test_generate_untrained_raises():
    g, d = tiny_specs()
    with pytest.raises(StateError):
        ConditionalGAN(g, d).generate(0.2, 0)


def test_checkpoint_round_trip(trained_tiny, tmp_path):
    trained_tiny.save(tmp_path / "g.pt", extra={"config_hash": "abc"})
    back = ConditionalGAN.load(tmp_path / "g.pt")
    assert back.extra["config_hash"] == "abc"
    assert np.array_equal(back.generate(0.2, 1, 3, seed=1).images,
                          trained_tiny.generate(0.2, 1, 3, seed=1).images)
    torch.save({"format": "x"}, tmp_path / "bad.pt")
    with pytest.raises(ValidationError):
        ConditionalGAN.load(tmp_path / "bad.pt")



def test_condition_gain_equals_rescaled_porosity():
    # the gain only rescales the porosity plane, so it must match feeding k * phi at gain 1
    g, d = tiny_specs()
    torch.manual_seed(3)
    G1, D1 = Generator(g).eval(), Discriminator(d).eval()
    G7 = Generator(dataclasses.replace(g, condition_gain=7.0)).eval()
    D7 = Discriminator(dataclasses.replace(d, condition_gain=7.0)).eval()
    G7.load_state_dict(G1.state_dict())
    D7.load_state_dict(D1.state_dict())
    z = torch.rand(3, g.latent_dim)
    phi = torch.tensor([0.1, 0.2, 0.3])
    oh = torch.nn.functional.one_hot(torch.tensor([0, 1, 1]), 2).float()
    with torch.no_grad():
        assert torch.allclose(G7(z, phi, oh), G1(z, 7 * phi, oh), atol=1e-6)
        img = G1(z, phi, oh)
        assert torch.allclose(D7(img, phi, oh), D1(img, 7 * phi, oh), atol=1e-6)
        # the assembled block still carries the raw porosity
        assert torch.all(G7.assemble_input(z, phi, oh)[:, -1, 0, 0] == phi)
