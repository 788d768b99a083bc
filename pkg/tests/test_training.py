"""Tests for losses, the optimizer, update steps, checkpoints, and the loop."""

import numpy as np
import numpy.testing as npt
import pytest

from viewmorph import autodiff as ad
from viewmorph import training as tr
from viewmorph.errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    ConfigError,
    LabelError,
)
from viewmorph.networks import Discriminator, Generator, NetworkConfig, one_hot_codes

RNG = np.random.default_rng


def tiny_net(**kw):
    base = dict(
        n_identities=3,
        image_size=16,
        base_channels=2,
        id_features=4,
        noise_features=4,
        n_viewpoints=5,
        variant="full",
        link_radius=1,
    )
    base.update(kw)
    return NetworkConfig(**base)


def tiny_train_config(**kw):
    base = dict(
        network=tiny_net(),
        steps=2,
        batch_size=4,
        lr=2e-4,
        attr_weight=5.0,
        seed=0,
        checkpoint_every=100,
    )
    base.update(kw)
    return tr.TrainConfig(**base)


class ArrayDataset:
    def __init__(self, images, identities, viewpoints):
        self.images = images
        self.identities = identities
        self.viewpoints = viewpoints


def toy_dataset(net, m=12, seed=5):
    r = RNG(seed)
    images = np.tanh(r.normal(size=(m, 3, net.image_size, net.image_size)))
    return ArrayDataset(images, r.integers(0, net.n_identities, m), r.integers(0, net.n_viewpoints, m))


def ce_oracle(logits, labels):
    """Mean negative log softmax probability, computed row by row."""
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for row, label in zip(logits, labels):
        shifted = row - row.max()
        total += -(shifted[label] - np.log(np.exp(shifted).sum()))
    return total / len(labels)


def make_pair(seed=3, **net_kw):
    """Generator/discriminator pair plus optimizers, deterministically built."""
    net = tiny_net(**net_kw)
    build = RNG(seed)
    gen = Generator(net, build)
    disc = Discriminator(net, build)
    opt_g = tr.Adam(gen.parameters(), 2e-4)
    opt_d = tr.Adam(disc.parameters(), 2e-4)
    return net, gen, disc, opt_g, opt_d


def make_batch(net, n=4, seed=9):
    r = RNG(seed)
    images = ad.Tensor(np.tanh(r.normal(size=(n, 3, net.image_size, net.image_size))))
    y_i = r.integers(0, net.n_identities, n)
    y_a = r.integers(0, net.n_viewpoints, n)
    targets = r.integers(0, net.n_viewpoints, n)
    z = ad.Tensor(r.normal(size=(n, net.noise_features)))
    codes = ad.Tensor(one_hot_codes(targets, net.n_viewpoints))
    return images, y_i, y_a, targets, z, codes


def snapshot(params):
    return {name: p.data.copy() for name, p in params.items()}


# --- loss formulas ------------------------------------------------------


class TestLossFormulas:
    def setup_method(self):
        r = RNG(0)
        self.n = 6
        self.id_real = ad.Tensor(r.normal(size=(self.n, 4)))
        self.attr_real = ad.Tensor(r.normal(size=(self.n, 5)))
        self.id_fake = ad.Tensor(r.normal(size=(self.n, 4)))
        self.attr_fake = ad.Tensor(r.normal(size=(self.n, 5)))
        self.y_i = r.integers(0, 3, self.n)
        self.y_a = r.integers(0, 5, self.n)

    def test_discriminator_loss_matches_scripted_formula(self):
        loss = tr.discriminator_loss(self.id_real, self.attr_real, self.id_fake, self.y_i, self.y_a, 3, 5.0)
        want = (
            ce_oracle(self.id_real.data, self.y_i)
            + 5.0 * ce_oracle(self.attr_real.data, self.y_a)
            + ce_oracle(self.id_fake.data, [3] * self.n)
        )
        assert abs(float(loss.data) - want) < 1e-12

    def test_generator_loss_matches_scripted_formula(self):
        loss = tr.generator_loss(self.id_fake, self.attr_fake, self.y_i, self.y_a, 5.0)
        want = 5.0 * ce_oracle(self.attr_fake.data, self.y_a) + ce_oracle(self.id_fake.data, self.y_i)
        assert abs(float(loss.data) - want) < 1e-12

    def test_attr_weight_zero_drops_attribute_terms(self):
        d = tr.discriminator_loss(self.id_real, self.attr_real, self.id_fake, self.y_i, self.y_a, 3, 0.0)
        want_d = ce_oracle(self.id_real.data, self.y_i) + ce_oracle(self.id_fake.data, [3] * self.n)
        assert abs(float(d.data) - want_d) < 1e-12
        g = tr.generator_loss(self.id_fake, self.attr_fake, self.y_i, self.y_a, 0.0)
        assert abs(float(g.data) - ce_oracle(self.id_fake.data, self.y_i)) < 1e-12

    def test_confident_discriminator_loss_near_zero(self):
        id_real = np.full((self.n, 4), -50.0)
        id_real[np.arange(self.n), self.y_i] = 50.0
        attr_real = np.full((self.n, 5), -50.0)
        attr_real[np.arange(self.n), self.y_a] = 50.0
        id_fake = np.full((self.n, 4), -50.0)
        id_fake[:, 3] = 50.0
        loss = tr.discriminator_loss(
            ad.Tensor(id_real), ad.Tensor(attr_real), ad.Tensor(id_fake), self.y_i, self.y_a, 3, 5.0
        )
        assert 0.0 <= float(loss.data) < 1e-6

    def test_fake_term_targets_the_reserved_class(self):
        # logits that nail the reserved class vs. logits that nail class 0
        hit = np.full((self.n, 4), -10.0)
        hit[:, 3] = 10.0
        miss = np.full((self.n, 4), -10.0)
        miss[:, 0] = 10.0
        base = dict(
            id_logits_real=self.id_real,
            attr_logits_real=self.attr_real,
            identity_labels=self.y_i,
            viewpoint_labels=self.y_a,
            fake_class=3,
            attr_weight=1.0,
        )
        low = tr.discriminator_loss(id_logits_fake=ad.Tensor(hit), **base)
        high = tr.discriminator_loss(id_logits_fake=ad.Tensor(miss), **base)
        assert float(low.data) + 10.0 < float(high.data)


# --- optimizer ----------------------------------------------------------


class TestAdam:
    def test_matches_scripted_reference_updates(self):
        lr, b1, b2, eps = 1e-2, 0.5, 0.999, 1e-8
        p = ad.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        opt = tr.Adam({"p": p}, lr, b1, b2, eps)

        ref = p.data.copy()
        m = np.zeros(3)
        v = np.zeros(3)
        r = RNG(1)
        for t in range(1, 6):
            g = r.normal(size=3)
            p.grad = g.copy()
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            ref = ref - lr * mhat / (np.sqrt(vhat) + eps)
            npt.assert_allclose(p.data, ref, rtol=0, atol=1e-12)

    def test_missing_grad_leaves_param_untouched(self):
        p = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        q = ad.Tensor(np.array([3.0]), requires_grad=True)
        opt = tr.Adam({"p": p, "q": q}, 0.1)
        p.grad = np.array([1.0, 1.0])
        opt.step()
        assert opt.t == 1
        npt.assert_array_equal(q.data, [3.0])
        assert not np.array_equal(p.data, [1.0, 2.0])

    def test_zero_grad_clears_all(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([5.0])
        opt = tr.Adam({"p": p}, 0.1)
        opt.zero_grad()
        assert p.grad is None


# --- update steps -------------------------------------------------------


class TestUpdateSteps:
    def test_d_step_loss_matches_logit_oracle(self):
        net, gen_a, disc_a, _, opt_da = make_pair(seed=3)
        _, gen_b, disc_b, _, opt_db = make_pair(seed=3)
        images, y_i, y_a, targets, z, codes = make_batch(net)

        fake = gen_a.generate(images, z, codes, train=True)
        id_real, attr_real = disc_a(images)
        id_fake, _ = disc_a(fake.detach())
        want = (
            ce_oracle(id_real.data, y_i)
            + 5.0 * ce_oracle(attr_real.data, y_a)
            + ce_oracle(id_fake.data, [net.fake_class] * len(y_i))
        )

        got = tr.d_step(gen_b, disc_b, opt_db, images, y_i, y_a, z, codes, 5.0)
        assert abs(got - want) < 1e-9

    def test_g_step_loss_matches_logit_oracle(self):
        net, gen_a, disc_a, _, _ = make_pair(seed=3)
        _, gen_b, disc_b, opt_gb, _ = make_pair(seed=3)
        images, y_i, _, targets, z, codes = make_batch(net)

        fake = gen_a.generate(images, z, codes, train=True)
        id_fake, attr_fake = disc_a(fake)
        want = 5.0 * ce_oracle(attr_fake.data, targets) + ce_oracle(id_fake.data, y_i)

        got = tr.g_step(gen_b, disc_b, opt_gb, images, y_i, targets, z, codes, 5.0)
        assert abs(got - want) < 1e-9

    def test_d_step_updates_only_discriminator(self):
        net, gen, disc, _, opt_d = make_pair()
        images, y_i, y_a, _, z, codes = make_batch(net)
        g_before = snapshot(gen.parameters())
        d_before = snapshot(disc.parameters())

        tr.d_step(gen, disc, opt_d, images, y_i, y_a, z, codes, 5.0)

        for name, p in gen.parameters().items():
            npt.assert_array_equal(p.data, g_before[name])
            assert p.grad is None  # the generated batch entered as a constant
        changed = [name for name, p in disc.parameters().items() if not np.array_equal(p.data, d_before[name])]
        assert changed

    def test_g_step_updates_only_generator(self):
        net, gen, disc, opt_g, _ = make_pair()
        images, y_i, _, targets, z, codes = make_batch(net)
        g_before = snapshot(gen.parameters())
        d_before = snapshot(disc.parameters())

        tr.g_step(gen, disc, opt_g, images, y_i, targets, z, codes, 5.0)

        for name, p in disc.parameters().items():
            npt.assert_array_equal(p.data, d_before[name])
            assert p.grad is None  # discriminator weights sit outside the recorded graph
            assert p.requires_grad  # freezing is undone afterwards
        changed = [name for name, p in gen.parameters().items() if not np.array_equal(p.data, g_before[name])]
        assert changed

    def test_train_step_matches_separate_steps(self):
        net, gen_a, disc_a, opt_ga, opt_da = make_pair(seed=11)
        _, gen_b, disc_b, opt_gb, opt_db = make_pair(seed=11)
        images, y_i, y_a, targets, z, codes = make_batch(net, seed=13)

        d_fused, g_fused = tr.train_step(
            gen_a, disc_a, opt_ga, opt_da, images, y_i, y_a, targets, z, codes, 5.0
        )
        d_sep = tr.d_step(gen_b, disc_b, opt_db, images, y_i, y_a, z, codes, 5.0)
        g_sep = tr.g_step(gen_b, disc_b, opt_gb, images, y_i, targets, z, codes, 5.0)

        assert abs(d_fused - d_sep) < 1e-9
        assert abs(g_fused - g_sep) < 1e-9
        for name, p in gen_a.parameters().items():
            npt.assert_allclose(p.data, gen_b.parameters()[name].data, rtol=0, atol=1e-9)
        for name, p in disc_a.parameters().items():
            npt.assert_allclose(p.data, disc_b.parameters()[name].data, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("which", ["identity", "viewpoint"])
    def test_label_range_validation(self, which):
        net, gen, disc, opt_g, opt_d = make_pair()
        images, y_i, y_a, targets, z, codes = make_batch(net)
        if which == "identity":
            y_i = np.array([0, 1, 2, net.n_identities])
        else:
            y_a = np.array([0, 1, 2, net.n_viewpoints])
        with pytest.raises(LabelError):
            tr.d_step(gen, disc, opt_d, images, y_i, y_a, z, codes, 5.0)

    def test_overfit_single_batch_losses_strictly_decrease(self):
        # with the discriminator frozen and only the identity term active,
        # repeated generator updates on one batch must descend monotonically
        net, gen, disc, _, _ = make_pair(seed=21)
        opt_g = tr.Adam(gen.parameters(), lr=1e-2)
        images, y_i, _, targets, z, codes = make_batch(net, seed=23)
        losses = [tr.g_step(gen, disc, opt_g, images, y_i, targets, z, codes, 0.0) for _ in range(20)]
        assert all(np.isfinite(losses))
        for earlier, later in zip(losses, losses[1:]):
            assert later < earlier


# --- checkpoint container ----------------------------------------------


class TestTensorContainer:
    def payload(self):
        return {
            "weights": RNG(0).normal(size=(3, 4)),
            "counts": np.arange(5, dtype=np.int64),
            "small": np.float32(1.5) * np.ones((2,), dtype=np.float32),
            "scalar": np.array(7.25),
            "words": np.array([1, 2**63], dtype=np.uint64),
            "βγ-text": np.frombuffer("héllo".encode("utf-8"), dtype=np.uint8).copy(),
        }

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "state.bin"
        original = self.payload()
        tr.save_tensors(path, original)
        loaded = tr.load_tensors(path)
        assert set(loaded) == set(original)
        for name, arr in original.items():
            assert loaded[name].dtype == arr.dtype
            assert loaded[name].shape == arr.shape
            assert loaded[name].tobytes() == arr.tobytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "state.bin"
        tr.save_tensors(path, self.payload())
        blob = path.read_bytes()
        path.write_bytes(b"NOPE" + blob[4:])
        with pytest.raises(CheckpointFormatError):
            tr.load_tensors(path)

    def test_rejects_unsupported_version(self, tmp_path):
        import struct

        path = tmp_path / "state.bin"
        tr.save_tensors(path, self.payload())
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            tr.load_tensors(path)

    def test_rejects_truncation(self, tmp_path):
        path = tmp_path / "state.bin"
        tr.save_tensors(path, self.payload())
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointCorruptionError):
            tr.load_tensors(path)

    def test_rejects_trailing_bytes(self, tmp_path):
        path = tmp_path / "state.bin"
        tr.save_tensors(path, self.payload())
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointCorruptionError):
            tr.load_tensors(path)

    def test_rejects_unknown_dtype_tag(self, tmp_path):
        import struct

        path = tmp_path / "state.bin"
        tr.save_tensors(path, {"a": np.zeros(2)})
        blob = bytearray(path.read_bytes())
        tag_offset = 4 + 4 + 4 + 4 + 1  # magic, version, count, name length, name "a"
        assert blob[tag_offset] in (0, 1)
        blob[tag_offset] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointCorruptionError):
            tr.load_tensors(path)

    def test_rejects_unsupported_dtype_on_save(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            tr.save_tensors(tmp_path / "state.bin", {"bad": np.zeros(2, dtype=np.int32)})


class TestCheckpointRoundTrip:
    def run_one_step(self, seed=3):
        net, gen, disc, opt_g, opt_d = make_pair(seed=seed)
        batch = make_batch(net)
        images, y_i, y_a, targets, z, codes = batch
        tr.train_step(gen, disc, opt_g, opt_d, images, y_i, y_a, targets, z, codes, 5.0)
        config = tr.TrainConfig(network=net, steps=5, batch_size=4, seed=7)
        return config, gen, disc, opt_g, opt_d

    def test_full_state_round_trip_bit_exact(self, tmp_path):
        config, gen, disc, opt_g, opt_d = self.run_one_step()
        rng = RNG(42)
        rng.normal(size=13)  # advance so the stream position is nontrivial
        path = tmp_path / "checkpoint.bin"
        tr.save_checkpoint(path, config, gen, disc, opt_g, opt_d, 17, rng)

        loaded = tr.load_checkpoint(path)
        assert loaded.step == 17
        assert loaded.config.to_text() == config.to_text()
        for name, p in gen.parameters().items():
            npt.assert_array_equal(loaded.gen.parameters()[name].data, p.data)
        for name, buf in gen.buffers().items():
            npt.assert_array_equal(loaded.gen.buffers()[name], buf)
        for name, p in disc.parameters().items():
            npt.assert_array_equal(loaded.disc.parameters()[name].data, p.data)
        assert loaded.opt_g.t == opt_g.t and loaded.opt_d.t == opt_d.t
        for name in opt_g.m:
            npt.assert_array_equal(loaded.opt_g.m[name], opt_g.m[name])
            npt.assert_array_equal(loaded.opt_g.v[name], opt_g.v[name])
        npt.assert_array_equal(loaded.rng.normal(size=6), rng.normal(size=6))

    def test_missing_entry_raises(self, tmp_path):
        config, gen, disc, opt_g, opt_d = self.run_one_step()
        payload = tr.checkpoint_payload(config, gen, disc, opt_g, opt_d, 1, RNG(0))
        victim = next(k for k in payload if k.startswith("g."))
        del payload[victim]
        path = tmp_path / "checkpoint.bin"
        tr.save_tensors(path, payload)
        with pytest.raises(CheckpointCorruptionError):
            tr.load_checkpoint(path)

    def test_shape_mismatch_raises(self, tmp_path):
        config, gen, disc, opt_g, opt_d = self.run_one_step()
        payload = tr.checkpoint_payload(config, gen, disc, opt_g, opt_d, 1, RNG(0))
        victim = next(k for k in payload if k.startswith("g."))
        payload[victim] = np.zeros((2, 2))
        path = tmp_path / "checkpoint.bin"
        tr.save_tensors(path, payload)
        with pytest.raises(CheckpointCorruptionError):
            tr.load_checkpoint(path)

    def test_rng_state_survives_mid_stream(self):
        rng = RNG(9)
        rng.normal(size=7)
        rng.integers(0, 100, size=3)
        words = tr._pack_rng_state(rng)
        clone = tr._unpack_rng_state(words)
        npt.assert_array_equal(clone.normal(size=9), rng.normal(size=9))
        npt.assert_array_equal(clone.integers(0, 1000, size=9), rng.integers(0, 1000, size=9))


# --- train config text --------------------------------------------------


class TestTrainConfigText:
    def test_round_trip(self):
        config = tiny_train_config(steps=7, lr=3e-4, attr_weight=2.5, seed=11)
        text = config.to_text()
        back = tr.TrainConfig.from_text(text)
        assert back.to_text() == text
        assert back.network == config.network
        assert back.steps == 7 and back.seed == 11
        assert back.lr == 3e-4 and back.attr_weight == 2.5

    def test_comments_and_blanks_ignored(self):
        text = "# header\n\n" + tiny_train_config().to_text() + "\n# trailing\n"
        assert tr.TrainConfig.from_text(text).network == tiny_net()

    def test_missing_key_names_it(self):
        lines = tiny_train_config().to_text().splitlines(keepends=True)
        text = "".join(l for l in lines if not l.startswith("attr_weight="))
        with pytest.raises(ConfigError, match="attr_weight"):
            tr.TrainConfig.from_text(text)

    def test_unknown_key_names_line_number(self):
        text = tiny_train_config().to_text() + "other=1\n"
        with pytest.raises(ConfigError, match="line 21: unknown key 'other'"):
            tr.TrainConfig.from_text(text)

    def test_unparseable_value_rejected(self):
        text = tiny_train_config().to_text().replace("steps=2", "steps=many")
        with pytest.raises(ConfigError, match="invalid config value"):
            tr.TrainConfig.from_text(text)

    def test_malformed_line_names_line_number(self):
        text = tiny_train_config().to_text() + "just words\n"
        with pytest.raises(ConfigError, match="line 21"):
            tr.TrainConfig.from_text(text)

    @pytest.mark.parametrize(
        "kw",
        [
            {"lr": 0.0},
            {"attr_weight": -1.0},
            {"batch_size": 1},
            {"steps": -1},
            {"checkpoint_every": 0},
        ],
    )
    def test_invalid_values_rejected(self, kw):
        with pytest.raises(ConfigError):
            tiny_train_config(**kw)


# --- the loop -----------------------------------------------------------


class TestTrainLoop:
    def test_metrics_and_losses_recorded(self, tmp_path):
        config = tiny_train_config(steps=3)
        data = toy_dataset(config.network)
        seen = []
        result = tr.train(config, data, tmp_path, progress=lambda s, d, g: seen.append(s))
        assert seen == [1, 2, 3]
        assert result.step == 3
        assert len(result.d_losses) == 3 and len(result.g_losses) == 3
        lines = result.metrics_path.read_text().splitlines()
        assert len(lines) == 3
        for i, line in enumerate(lines, 1):
            step, d_loss, g_loss = line.split("\t")
            assert int(step) == i
            assert np.isfinite(float(d_loss)) and np.isfinite(float(g_loss))
        assert result.checkpoint_path.exists()

    def test_two_runs_are_byte_identical(self, tmp_path):
        config = tiny_train_config(steps=3)
        data = toy_dataset(config.network)
        a = tr.train(config, data, tmp_path / "a")
        b = tr.train(config, data, tmp_path / "b")
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()

    def test_zero_steps_writes_initial_checkpoint(self, tmp_path):
        config = tiny_train_config(steps=0)
        data = toy_dataset(config.network)
        result = tr.train(config, data, tmp_path)
        assert result.metrics_path.read_text() == ""
        loaded = tr.load_checkpoint(result.checkpoint_path)
        assert loaded.step == 0
        fresh = Generator(config.network, RNG(config.seed))
        for name, p in fresh.parameters().items():
            npt.assert_array_equal(loaded.gen.parameters()[name].data, p.data)

    def test_resume_matches_straight_run(self, tmp_path):
        net = tiny_net()
        data = toy_dataset(net)
        straight = tr.train(tiny_train_config(network=net, steps=6, checkpoint_every=3), data, tmp_path / "a")

        half = tr.train(tiny_train_config(network=net, steps=3, checkpoint_every=3), data, tmp_path / "b")
        resumed = tr.train(
            tiny_train_config(network=net, steps=6, checkpoint_every=3),
            data,
            tmp_path / "b",
            resume_from=half.checkpoint_path,
        )

        assert straight.metrics_path.read_bytes() == resumed.metrics_path.read_bytes()
        assert straight.checkpoint_path.read_bytes() == resumed.checkpoint_path.read_bytes()
        for name, p in straight.gen.parameters().items():
            npt.assert_array_equal(resumed.gen.parameters()[name].data, p.data)

    def test_empty_dataset_rejected(self, tmp_path):
        config = tiny_train_config()
        data = ArrayDataset(np.zeros((0, 3, 16, 16)), np.zeros(0, int), np.zeros(0, int))
        with pytest.raises(ConfigError):
            tr.train(config, data, tmp_path)

    def test_dataset_labels_validated(self, tmp_path):
        config = tiny_train_config()
        data = toy_dataset(config.network)
        data.identities = data.identities + config.network.n_identities
        with pytest.raises(LabelError):
            tr.train(config, data, tmp_path)


class TestViewpointAccuracy:
    def test_matches_manual_argmax(self):
        net, _, disc, _, _ = make_pair()
        r = RNG(31)
        images = np.tanh(r.normal(size=(5, 3, net.image_size, net.image_size)))
        viewpoints = r.integers(0, net.n_viewpoints, 5)
        got = tr.viewpoint_accuracy(disc, images, viewpoints, batch_size=2)

        preds = disc(ad.Tensor(images))[1].data.argmax(axis=1)
        want = float((preds == viewpoints).mean())
        assert got == pytest.approx(want)
        assert 0.0 <= got <= 1.0
