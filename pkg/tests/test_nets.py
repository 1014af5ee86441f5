"""Heads and initialization: parameter counts, structural guarantees of the
energy/dissipation heads, and the checkpoint format."""
import numpy as np
import pytest

from phnn import autodiff as ad
from phnn import nets
from phnn.nets import MLPSpec


def params_for(heads, seed=0):
    p = nets.build_params(heads, seed)
    return p, {n: p.array(n) for n in p.names()}


def test_parameter_counts_small_heads():
    assert MLPSpec(2, 3, 16, 2).n_params == 371
    assert MLPSpec(1, 1, 20, 2).n_params == 481
    assert MLPSpec(1, 0, 20, 2).n_params == 0
    # six packed entries are required to fill a 3x3 triangular factor
    assert MLPSpec(3, 6, 16, 2).n_params == 438
    assert MLPSpec(3, 2, 24, 2).n_params == 746


def test_empty_network_contributes_nothing():
    spec = MLPSpec(1, 0, 20, 2)
    assert nets.init_head_segments(spec, np.random.default_rng(0), "Kz.") == {}
    out = nets.mlp_forward(spec, {}, np.ones((7, 1)))
    assert out.shape == (7, 0)


def test_zero_weights_give_zero_output():
    spec = MLPSpec(2, 3, 16, 2)
    p, arrays = params_for({"LH": spec})
    zero = {k: np.zeros_like(v) for k, v in arrays.items()}
    out = nets.mlp_forward(spec, zero, np.ones((4, 2)), "LH.")
    assert np.array_equal(out, np.zeros((4, 3)))


def test_mlp_input_dim_checked():
    spec = MLPSpec(2, 3, 16, 2)
    _, arrays = params_for({"LH": spec})
    with pytest.raises(ValueError):
        nets.mlp_forward(spec, arrays, np.ones((4, 3)), "LH.")


def test_assemble_lower_triangular_examples():
    m = nets.assemble_lower_triangular(np.array([1.0, 2.0, 3.0]), 2)
    assert np.array_equal(m, [[1.0, 0.0], [2.0, 3.0]])
    assert np.array_equal(nets.assemble_lower_triangular(np.zeros(0), 1, strict=True), [[0.0]])
    m3 = nets.assemble_lower_triangular(np.arange(1.0, 7.0), 3)
    assert np.array_equal(m3, [[1, 0, 0], [2, 3, 0], [4, 5, 6]])
    with pytest.raises(ValueError):
        nets.assemble_lower_triangular(np.zeros(4), 3)


def test_hamiltonian_head_at_origin_and_nonnegative():
    spec = MLPSpec(2, 3, 16, 2)
    for seed in range(5):
        _, arrays = params_for({"LH": spec}, seed)
        h0, g0 = nets.hamiltonian_head(spec, arrays, np.zeros(2))
        assert h0 == 0.0
        assert np.array_equal(g0, np.zeros(2))
        x = np.random.default_rng(seed).normal(0, 2, size=(200, 2))
        h, _ = nets.hamiltonian_head(spec, arrays, x)
        assert np.all(h >= 0.0)


def test_hamiltonian_gradient_matches_fd():
    spec = MLPSpec(2, 3, 16, 2)
    rng = np.random.default_rng(1)
    worst = 0.0
    for seed in range(10):
        _, arrays = params_for({"LH": spec}, seed)
        x = rng.normal(0, 1, size=(10, 2))
        _, g = nets.hamiltonian_head(spec, arrays, x)
        e = 1e-6
        for j in range(2):
            hp, _ = nets.hamiltonian_head(spec, arrays, x + e * np.eye(2)[j])
            hm, _ = nets.hamiltonian_head(spec, arrays, x - e * np.eye(2)[j])
            fd = (hp - hm) / (2 * e)
            worst = max(worst, np.max(np.abs(fd - g[:, j]) / (np.abs(fd) + 1e-9)))
    assert worst < 1e-6


def test_z_head_resistive_for_any_parameters():
    lz, kz = MLPSpec(1, 1, 20, 2), MLPSpec(1, 0, 20, 2)
    rng = np.random.default_rng(2)
    for seed in range(10):
        _, arrays = params_for({"Lz": lz, "Kz": kz}, seed)
        w = rng.normal(0, 3, size=(1000, 1))
        z = nets.z_head(lz, kz, arrays, w)
        assert np.all(z * w >= 0.0)
        # scalar flow: z carries the sign of w
        assert np.all(np.sign(z) * np.sign(w) >= 0.0)
    _, arrays = params_for({"Lz": lz, "Kz": kz}, 0)
    assert np.array_equal(nets.z_head(lz, kz, arrays, np.zeros((3, 1))), np.zeros((3, 1)))


def test_z_head_skew_part_drops_out_of_power():
    # with a 2-wide flow the skew part K - K^T is nonzero yet contributes no power
    lz, kz = MLPSpec(2, 3, 8, 1), MLPSpec(2, 1, 8, 1)
    _, arrays = params_for({"Lz": lz, "Kz": kz}, 3)
    w = np.random.default_rng(3).normal(size=(500, 2))
    z = nets.z_head(lz, kz, arrays, w)
    assert np.all(np.sum(z * w, axis=-1) >= -1e-15)


def test_r_head_symmetric_psd():
    lr = MLPSpec(3, 6, 16, 2)
    rng = np.random.default_rng(4)
    for seed in range(10):
        _, arrays = params_for({"LR": lr}, seed)
        x, u = rng.normal(size=(100, 2)), rng.normal(size=(100, 1))
        r = nets.r_head(lr, arrays, x, u)
        assert np.array_equal(r, np.swapaxes(r, -1, -2))
        assert np.linalg.eigvalsh(r).min() >= -1e-12
        v = rng.normal(size=(100, 3))
        assert np.all(np.einsum("bi,bij,bj->b", v, r, v) >= -1e-12)
    zero = {k: np.zeros_like(v) for k, v in arrays.items()}
    assert np.array_equal(nets.r_head(lr, zero, x[:1], u[:1]), np.zeros((1, 3, 3)))


def test_init_deterministic_and_seed_sensitive():
    heads = {"LH": MLPSpec(2, 3, 16, 2), "Lz": MLPSpec(1, 1, 20, 2)}
    a = nets.build_params(heads, 7)
    b = nets.build_params(heads, 7)
    c = nets.build_params(heads, 8)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_init_biases_zero_and_weight_variance():
    spec = MLPSpec(100, 100, 100, 1)
    segs = nets.init_head_segments(spec, np.random.default_rng(0), "f.")
    assert np.array_equal(segs["f.b0"], np.zeros(100))
    w = segs["f.W0"].ravel()  # 1e4 draws at fan_in 100
    target = 1.0 / (3 * 100)  # variance of uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    assert abs(w.var() - target) / target < 0.10
    assert np.abs(w).max() <= 1.0 / np.sqrt(100)


def test_checkpoint_round_trip(tmp_path):
    heads = {"LH": MLPSpec(2, 3, 16, 2), "Lz": MLPSpec(1, 1, 20, 2)}
    p = nets.build_params(heads, 11)
    path = tmp_path / "ck.bin"
    nets.save_params(path, p, meta={"seed": 11, "step": 42, "kind": "phnn_s"})
    q, meta = nets.load_params(path)
    assert np.array_equal(p.values, q.values)
    assert p.layout == q.layout
    assert meta == {"seed": 11, "step": 42, "kind": "phnn_s"}
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b'{"format": "other"}\n')
        nets.load_params(bad)
