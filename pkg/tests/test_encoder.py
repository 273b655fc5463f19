import numpy as np
import pytest

from croco import encoder
from croco.encoder import (
    CKPT_MAGIC,
    Checkpoint,
    CheckpointError,
    EncoderError,
    backward,
    forward,
    forward_train,
    init_branch,
    load_checkpoint,
    save_checkpoint,
)
from croco.raster import Modality, NormalizationStats, RasterTile, fit_normalization, normalize
from oracles import max_relative_error


def patches(rng, k, p=16):
    return rng.standard_normal((k, 3, p, p)).astype(np.float32)


class TestInit:
    def test_deterministic(self):
        a, b = init_branch("RGB", "desk", 5), init_branch("RGB", "desk", 5)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_branches_independent_storage(self):
        rgb, dem = init_branch("RGB", "desk", 5), init_branch("DEM", "desk", 5)
        before = {k: v.copy() for k, v in dem.params.items()}
        for v in rgb.params.values():
            v += 1.0
        for k in dem.params:
            assert not np.shares_memory(rgb.params[k], dem.params[k])
            np.testing.assert_array_equal(dem.params[k], before[k])

    def test_desk_layout(self):
        b = init_branch("RGB")
        widths = [b.params[f"conv{i}.bias"].size for i in range(4)]
        assert widths == [32, 64, 128, 256]
        assert b.params["proj.weight"].shape == (256, 128)
        assert all(not b.params[f"conv{i}.bias"].any() for i in range(4))
        bound = np.sqrt(6.0 / 27)
        assert np.abs(b.params["conv0.weight"]).max() <= bound

    def test_unknown_arch(self):
        with pytest.raises(EncoderError):
            init_branch("RGB", "transformer")


class TestForward:
    @pytest.mark.parametrize("p", encoder.SUPPORTED_PATCH_PX)
    @pytest.mark.parametrize("arch", ["desk", "deep"])
    def test_output_dim(self, rng, p, arch):
        z = forward(init_branch("DEM", arch, 0), patches(rng, 2, p))
        assert z.shape == (2, 128) and np.all(np.isfinite(z))

    def test_single_patch_64(self, rng):
        z = forward(init_branch("RGB"), patches(rng, 1, 64)[0])
        assert z.shape == (128,)

    def test_zero_projection(self, rng):
        b = init_branch("RGB")
        b.params["proj.weight"][:] = 0
        assert not forward(b, patches(rng, 3, 32)).any()

    def test_batch_equals_loop(self, rng):
        b = init_branch("RGB")
        x = patches(rng, 6, 32)
        batched = forward(b, x)
        looped = np.stack([forward(b, xi) for xi in x])
        np.testing.assert_allclose(batched, looped, atol=1e-6, rtol=0)

    def test_deterministic(self, rng):
        b = init_branch("DEM")
        x = patches(rng, 2, 32)
        assert forward(b, x).tobytes() == forward(b, x).tobytes()

    def test_errors(self, rng):
        b = init_branch("RGB")
        with pytest.raises(EncoderError):
            forward(b, patches(rng, 1, 24))
        x = patches(rng, 1, 32)
        x[0, 0, 0, 0] = np.inf
        with pytest.raises(EncoderError):
            forward(b, x)
        with pytest.raises(EncoderError):
            forward(b, rng.standard_normal((1, 4, 32, 32)))


class TestBackward:
    @pytest.mark.parametrize("arch", ["desk", "deep"])
    def test_parameter_gradients(self, rng, arch):
        b = init_branch("RGB", arch, 1).astype(np.float64)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((2, 128))

        def f():
            return float(np.sum(forward(b, x) * w))

        _, cache = forward_train(b, x)
        grads = backward(b, cache, w)
        h = 1e-5
        for name, param in b.params.items():
            flat = param.reshape(-1)
            idx = rng.choice(flat.size, size=min(8, flat.size), replace=False)
            num = []
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp = f()
                flat[i] = old - h
                fm = f()
                flat[i] = old
                num.append((fp - fm) / (2 * h))
            assert max_relative_error(grads[name].reshape(-1)[idx], num, floor=1e-6) <= 1e-4, name

    def test_rgb_update_leaves_dem_untouched(self, rng):
        from croco.trainer import sgd_momentum_update

        rgb, dem = init_branch("RGB"), init_branch("DEM")
        before = {k: v.copy() for k, v in dem.params.items()}
        x = patches(rng, 4, 16)
        _, cache = forward_train(rgb, x)
        grads = backward(rgb, cache, rng.standard_normal((4, 128)).astype(np.float32))
        sgd_momentum_update(rgb.params, grads, 0.1, 0.9)
        for k in before:
            assert dem.params[k].tobytes() == before[k].tobytes()


def test_data_init_decorrelates(rng):
    b = init_branch("RGB")
    x = (rng.random((64, 3, 32, 32)) * 0.2 + 0.5).astype(np.float32)
    raw = encoder.l2_normalize(forward(b, x))
    encoder.data_init(b, x)
    z = forward(b, x)
    cooked = encoder.l2_normalize(z)
    off = ~np.eye(64, dtype=bool)
    assert (raw @ raw.T)[off].mean() > 0.9
    assert abs((cooked @ cooked.T)[off].mean()) < 0.1
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-3)


class TestCheckpoint:
    def make(self, rng):
        dem_tile = RasterTile("d", rng.random((3, 8, 8)) * 50, 0.5, modality=Modality.DEM)
        stats = fit_normalization([dem_tile])
        return Checkpoint(init_branch("RGB", seed=3), init_branch("DEM", seed=3), stats, None, {"patch_m": 16.0}, 42), dem_tile

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        ckpt, _ = self.make(rng)
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt")
        for a, b in ((ckpt.rgb, back.rgb), (ckpt.dem, back.dem)):
            assert a.params.keys() == b.params.keys()
            for k in a.params:
                assert a.params[k].tobytes() == b.params[k].tobytes()
        assert back.step == 42 and back.config == {"patch_m": 16.0}
        assert back.fingerprint() == ckpt.fingerprint()
        x = patches(rng, 3, 32)
        assert forward(back.rgb, x).tobytes() == forward(ckpt.rgb, x).tobytes()

    def test_stats_reproduce_preprocessing(self, tmp_path, rng):
        ckpt, dem_tile = self.make(rng)
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert back.dem_stats == ckpt.dem_stats
        np.testing.assert_array_equal(normalize(dem_tile, back.dem_stats).data, normalize(dem_tile, ckpt.dem_stats).data)

    def test_bad_magic(self, tmp_path, rng):
        ckpt, _ = self.make(rng)
        p = save_checkpoint(ckpt, tmp_path / "c.ckpt")
        raw = p.read_bytes()
        p.write_bytes(b"X" + raw[1:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path, rng):
        ckpt, _ = self.make(rng)
        p = save_checkpoint(ckpt, tmp_path / "c.ckpt")
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path, rng):
        import struct

        ckpt, _ = self.make(rng)
        p = save_checkpoint(ckpt, tmp_path / "c.ckpt")
        raw = bytearray(p.read_bytes())
        raw[len(CKPT_MAGIC) : len(CKPT_MAGIC) + 4] = struct.pack("<I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_stats_type(self):
        s = NormalizationStats((1.0, 2.0, 3.0), (1.0, 1.0, 1.0), Modality.DEM)
        assert NormalizationStats.from_dict(s.to_dict()) == s
