import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskmae import mae, vit
from deskmae import tensor as T
from deskmae.mae import MaeConfig
from deskmae.tensor import Tensor
from deskmae.vit import ViTConfig

ENC = ViTConfig(image_size=16, patch_size=4, channels=3, depth=2, width=16, heads=2, mlp_ratio=2)
CFG = MaeConfig(encoder=ENC, decoder_depth=1, decoder_width=8, decoder_heads=2)


def assert_plan_ok(plan):
    n = plan.n
    assert np.array_equal(plan.ids_restore[plan.ids_shuffle], np.arange(n))
    assert plan.mask.sum() == n - plan.len_keep
    visible = set(plan.ids_shuffle[: plan.len_keep].tolist())
    for j in range(n):
        assert (plan.mask[j] == 0) == (j in visible)


class TestRandomPlan:
    def test_zero_ratio(self):
        plan = mae.random_mask_plan(10, 0.0, np.random.default_rng(0))
        assert plan.len_keep == 10 and not plan.mask.any()
        assert np.array_equal(plan.ids_shuffle, np.arange(10))

    def test_fig2_count(self):
        assert mae.random_mask_plan(196, 0.8, np.random.default_rng(0)).len_keep == 39

    def test_default_ratio_count_and_invariants(self):
        plan = mae.random_mask_plan(196, 0.75, np.random.default_rng(1))
        assert plan.len_keep == 49
        assert_plan_ok(plan)

    def test_minimum_one_visible_and_rejection(self):
        assert mae.random_mask_plan(3, 0.99, np.random.default_rng(0)).len_keep == 1
        with pytest.raises(mae.MaskError):
            mae.random_mask_plan(3, 1.0, np.random.default_rng(0))

    def test_round_off(self):
        assert mae.keep_count(100, 0.9) == 10

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 300), st.floats(0, 0.99), st.integers(0, 2**32))
    def test_invariants_property(self, n, r, seed):
        assert_plan_ok(mae.random_mask_plan(n, r, np.random.default_rng(seed)))


class TestGridPlan:
    def test_two_by_two(self):
        plan = mae.grid_mask_plan(2)
        assert plan.len_keep == 1 and plan.ids_keep.tolist() == [0]

    def test_fourteen(self):
        plan = mae.grid_mask_plan(14)
        assert plan.len_keep == 49 and plan.mask.sum() == 147
        rows, cols = np.divmod(plan.ids_keep, 14)
        assert np.all(rows % 2 == 0) and np.all(cols % 2 == 0)
        assert_plan_ok(plan)

    def test_deterministic_and_odd(self):
        a, b = mae.grid_mask_plan(6), mae.grid_mask_plan(6)
        assert np.array_equal(a.ids_shuffle, b.ids_shuffle)
        with pytest.raises(mae.MaskError):
            mae.grid_mask_plan(7)


class TestBlockPlan:
    def test_half_ratio_bounds(self):
        for seed in range(50):
            plan = mae.block_mask_plan(14, 0.5, np.random.default_rng(seed))
            assert 98 <= plan.mask.sum() <= 112

    def test_union_of_rectangles(self):
        for seed in range(20):
            plan = mae.block_mask_plan(14, 0.75, np.random.default_rng(seed))
            painted = np.zeros((14, 14), bool)
            for top, left, h, w in plan.blocks:
                assert 0.3 <= h / w <= 1 / 0.3
                painted[top:top + h, left:left + w] = True
            assert all(h * w >= 16 for _, _, h, w in plan.blocks[:-1])
            assert np.array_equal(painted.reshape(-1), plan.mask.astype(bool))

    def test_visible_first(self):
        plan = mae.block_mask_plan(8, 0.4, np.random.default_rng(3))
        assert not plan.mask[plan.ids_keep].any()
        assert plan.mask[plan.ids_masked].all()

    def test_bad_ratio(self):
        with pytest.raises(mae.MaskError):
            mae.block_mask_plan(8, 0.0, np.random.default_rng(0))


def test_inverse_identity_1000_plans_per_sampler():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        assert_plan_ok(mae.random_mask_plan(196, 0.75, rng))
        assert_plan_ok(mae.block_mask_plan(14, 0.75, rng))
    assert_plan_ok(mae.grid_mask_plan(14))


def test_harmonize_shares_len_keep():
    rng = np.random.default_rng(0)
    plans = [mae.block_mask_plan(8, 0.5, rng) for _ in range(6)]
    out = mae.harmonize(plans, rng)
    assert len({p.len_keep for p in out}) == 1
    for before, after in zip(plans, out):
        assert_plan_ok(after)
        assert np.all(after.mask >= before.mask)


def test_sample_plans_keyed_by_image():
    a = mae.sample_plans(CFG, 7, 2, [5, 9])
    b = mae.sample_plans(CFG, 7, 2, [9])
    assert np.array_equal(a[1].ids_shuffle, b[0].ids_shuffle)
    c = mae.sample_plans(CFG, 7, 3, [9])
    assert not np.array_equal(c[0].ids_shuffle, b[0].ids_shuffle)


def test_grid_sampling_forces_ratio():
    with pytest.raises(ValueError):
        MaeConfig(encoder=ENC, sampling="grid", mask_ratio=0.5, decoder_width=8, decoder_heads=2)
    with pytest.raises(ValueError):
        MaeConfig(encoder=ViTConfig(image_size=12, patch_size=4), sampling="grid", decoder_width=8, decoder_heads=2)


# -- encoder / decoder -------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    params = mae.init_mae(CFG, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(1)
    for v in params.values():
        v.data += 0.05 * rng.standard_normal(v.shape)
    images = np.random.default_rng(2).standard_normal((3, 16, 16, 3))
    return params, images


def test_zero_ratio_matches_vit_bit_exact(model):
    params, images = model
    cfg = MaeConfig(encoder=ENC, mask_ratio=0.0, decoder_depth=1, decoder_width=8, decoder_heads=2)
    plans = mae.sample_plans(cfg, 0, 0, range(3))
    out = mae.encode_visible(images, plans, params, cfg)
    ref = vit.encode(images, params, ENC)
    assert out.data.tobytes() == ref.data.tobytes()


def test_encoder_token_count_196():
    enc = ViTConfig(image_size=224, patch_size=16, channels=3, depth=1, width=8, heads=2, mlp_ratio=1)
    cfg = MaeConfig(encoder=enc, decoder_depth=1, decoder_width=8, decoder_heads=2)
    params = mae.init_mae(cfg, np.random.default_rng(0))
    images = np.zeros((1, 224, 224, 3), np.float32)
    out = mae.encode_visible(images, mae.sample_plans(cfg, 0, 0, [0]), params, cfg)
    assert out.shape == (1, 50, 8)


def test_token_count_decreases_with_ratio(model):
    params, images = model
    counts = []
    for r in (0.0, 0.25, 0.5, 0.75, 0.9):
        cfg = MaeConfig(encoder=ENC, mask_ratio=r, decoder_depth=1, decoder_width=8, decoder_heads=2)
        counts.append(mae.encode_visible(images, mae.sample_plans(cfg, 0, 0, range(3)), params, cfg).shape[1])
    assert counts == sorted(counts, reverse=True) and len(set(counts)) == len(counts)
    assert counts[0] == ENC.n_patches + 1


@pytest.mark.parametrize("sampling", ["random", "block", "grid"])
def test_masked_pixels_are_invisible(model, sampling):
    params, images = model
    cfg = MaeConfig(encoder=ENC, sampling=sampling, decoder_depth=1, decoder_width=8, decoder_heads=2)
    plans = mae.sample_plans(cfg, 3, 0, range(3))
    base = mae.encode_visible(images, plans, params, cfg).data
    rng = np.random.default_rng(9)
    for _ in range(3):
        patches = vit.patchify(images, 4).copy()
        for b, plan in enumerate(plans):
            ms = plan.ids_masked
            patches[b, ms] = rng.standard_normal((len(ms), patches.shape[-1])) * 10
            # also swap two removed patches
            patches[b, [ms[0], ms[1]]] = patches[b, [ms[1], ms[0]]]
        perturbed = vit.unpatchify(patches, (4, 4), 4)
        out = mae.encode_visible(perturbed, plans, params, cfg).data
        assert out.tobytes() == base.tobytes()


def test_plan_length_mismatch(model):
    params, images = model
    plans = mae.sample_plans(CFG, 0, 0, range(2))
    with pytest.raises(mae.MaskError):
        mae.encode_visible(images, plans, params, CFG)


def test_decode_shape_and_zero_head(model):
    params, images = model
    plans = mae.sample_plans(CFG, 0, 0, range(3))
    pred = mae.decode_full(mae.encode_visible(images, plans, params, CFG), plans, params, CFG)
    assert pred.shape == (3, 16, 48)
    zeroed = dict(params)
    zeroed["decoder.pred.w"] = Tensor(np.zeros_like(params["decoder.pred.w"].data))
    zeroed["decoder.pred.b"] = Tensor(np.zeros_like(params["decoder.pred.b"].data))
    pred = mae.decode_full(mae.encode_visible(images, plans, params, CFG), plans, zeroed, CFG)
    assert not pred.data.any()


def test_decoder_rows_align_with_grid(model):
    """Loop oracle: with identity decoder blocks, row i depends only on what sits at patch i."""
    params, images = model
    p = dict(params)
    for name in ("attn.proj", "mlp.fc2"):
        for s in ("w", "b"):
            key = f"decoder.blocks.0.{name}.{s}"
            p[key] = Tensor(np.zeros_like(params[key].data))
    pos = vit.sincos_pos_embed(17, 8)

    def ln(x, g, b):
        mu = x.mean()
        return (x - mu) / np.sqrt(((x - mu) ** 2).mean() + vit.LN_EPS) * g + b

    for seed in (0, 1, 2):
        plans = mae.sample_plans(CFG, seed, 0, range(3))
        latents = mae.encode_visible(images, plans, p, CFG).data
        pred = mae.decode_full(Tensor(latents), plans, p, CFG).data
        for b, plan in enumerate(plans):
            for i in range(16):
                hits = [j for j, v in enumerate(plan.ids_shuffle[: plan.len_keep]) if v == i]
                if hits:
                    tok = latents[b, 1 + hits[0]] @ p["decoder.embed.w"].data + p["decoder.embed.b"].data
                else:
                    tok = p["decoder.mask_token"].data
                h = ln(tok + pos[1 + i], p["decoder.norm.g"].data, p["decoder.norm.b"].data)
                expect = h @ p["decoder.pred.w"].data + p["decoder.pred.b"].data
                np.testing.assert_allclose(pred[b, i], expect, atol=1e-10)


def test_mask_token_encoder_variant(model):
    params, images = model
    cfg = MaeConfig(encoder=ENC, decoder_depth=1, decoder_width=8, decoder_heads=2, mask_tokens_in_encoder=True)
    p = mae.init_mae(cfg, np.random.default_rng(0), np.float64)
    res = mae.mae_step(images, cfg, p, seed=0)
    assert res.pred.shape == (3, 16, 48) and np.isfinite(res.loss.item())


# -- targets -----------------------------------------------------------------

def test_raw_target_is_patchify():
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3))
    assert np.array_equal(mae.build_target(x, "raw_pixels", 4), vit.patchify(x, 4))


def test_normalized_target():
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3))
    x[0, :4, :4] = 0.5  # constant patch
    t = mae.build_target(x, "normalized_pixels", 4)
    assert not t[0, 0].any()
    rest = t.reshape(-1, 48)[1:]
    assert np.abs(rest.mean(-1)).max() < 1e-6
    assert np.abs(rest.var(-1) - 1).max() < 1e-4


def test_pca_target_requires_basis():
    with pytest.raises(ValueError):
        mae.build_target(np.zeros((1, 4, 4, 1)), "pca", 2)


def power_iteration_basis(x, k, iters=3000):
    """Deflated power iteration on the covariance; independent of eigh."""
    xc = x - x.mean(0)
    cov = xc.T @ xc / len(x)
    comps = []
    rng = np.random.default_rng(0)
    for _ in range(k):
        v = rng.standard_normal(cov.shape[0])
        for _ in range(iters):
            v = cov @ v
            v /= np.linalg.norm(v)
        lam = v @ cov @ v
        comps.append(v)
        cov = cov - lam * np.outer(v, v)
    return np.array(comps)


class TestPca:
    def test_line_data(self):
        t = np.random.default_rng(0).standard_normal(50)
        direction = np.array([1.0, 2.0, -2.0]) / 3
        basis = mae.pca_fit(t[:, None] * direction + [1, 2, 3], 1)
        assert abs(basis.components[0] @ direction) > 1 - 1e-6

    def test_explained_variance_non_increasing(self):
        x = np.random.default_rng(1).standard_normal((200, 12)) * np.arange(1, 13)
        ev = mae.pca_fit(x, 12).explained_variance
        assert np.all(np.diff(ev) <= 0)

    def test_orthonormal(self):
        x = np.random.default_rng(2).standard_normal((100, 10))
        c = mae.pca_fit(x, 6).components
        assert np.abs(c @ c.T - np.eye(6)).max() < 1e-6

    def test_full_basis_reconstructs(self):
        x = np.random.default_rng(3).standard_normal((2, 8, 8, 3))
        patches = vit.patchify(x, 4).reshape(-1, 48)
        fit_data = np.random.default_rng(4).standard_normal((500, 48))
        basis = mae.pca_fit(fit_data, 48)
        coeffs = mae.build_target(x, "pca", 4, basis=basis)
        assert coeffs.shape == (2, 4, 48)
        assert np.abs(basis.reconstruct(coeffs.reshape(-1, 48)) - patches).max() < 1e-5

    def test_matches_power_iteration(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((400, 8)) * np.array([8, 6, 5, 3, 2, 1.5, 1, 0.5])
        x = x @ np.linalg.qr(rng.standard_normal((8, 8)))[0]
        basis = mae.pca_fit(x, 4)
        oracle = power_iteration_basis(x, 4)
        probe = rng.standard_normal((20, 8))
        ours = basis.project(probe)
        theirs = (probe - x.mean(0)) @ oracle.T
        for j in range(4):
            sign = np.sign(ours[:, j] @ theirs[:, j])
            assert np.abs(ours[:, j] - sign * theirs[:, j]).max() < 1e-4

    def test_rejects(self):
        with pytest.raises(ValueError):
            mae.pca_fit(np.zeros((10, 4)), 5)
        with pytest.raises(ValueError):
            mae.pca_fit(np.zeros((3, 4)), 3)


# -- loss --------------------------------------------------------------------

class TestMaskedMse:
    def test_perfect(self):
        t = np.random.default_rng(0).standard_normal((2, 4, 3))
        assert mae.masked_mse(Tensor(t), t, np.ones((2, 4))).item() == 0.0

    def test_constant_offset(self):
        t = np.zeros((1, 3, 5))
        mask = np.array([[0.0, 1.0, 0.0]])
        assert mae.masked_mse(Tensor(t + 2.0), t, mask).item() == 4.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        pred, tgt = rng.standard_normal((3, 6, 4)), rng.standard_normal((3, 6, 4))
        mask = (rng.random((3, 6)) < 0.6).astype(float)
        mask[0, 0] = 1
        acc, cnt = 0.0, 0
        for b in range(3):
            for i in range(6):
                if mask[b, i]:
                    acc += sum((pred[b, i, e] - tgt[b, i, e]) ** 2 for e in range(4)) / 4
                    cnt += 1
        assert abs(mae.masked_mse(Tensor(pred), tgt, mask).item() - acc / cnt) < 1e-10

    def test_zero_gradient_on_visible(self):
        rng = np.random.default_rng(2)
        pred = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        mask = np.array([[1, 0, 1, 0, 0], [0, 0, 0, 1, 1]], float)
        T.backward(mae.masked_mse(pred, rng.standard_normal((2, 5, 3)), mask))
        assert np.all(pred.grad[mask == 0] == 0.0)
        assert np.all(pred.grad[mask == 1] != 0.0)

    def test_all_visible_rejected(self):
        with pytest.raises(mae.MaskError):
            mae.masked_mse(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 2)), np.zeros((1, 2)))


class TestMaeStep:
    def test_loss_finite_positive_and_deterministic(self, model):
        params, images = model
        a = mae.mae_step(images, CFG, params, seed=4)
        b = mae.mae_step(images, CFG, params, seed=4)
        assert np.isfinite(a.loss.item()) and a.loss.item() > 0
        assert a.loss.item() == b.loss.item()

    def test_visible_predictions_get_zero_gradient(self, model):
        params, images = model
        res = mae.mae_step(images, CFG, params, seed=5)
        res.pred.retain_grad = True
        T.backward(res.loss)
        mask = np.stack([p.mask for p in res.plans])
        assert np.all(res.pred.grad[mask == 0] == 0.0)
        for v in params.values():
            v.grad = None

    def test_full_average_differs(self, model):
        params, images = model
        res = mae.mae_step(images, CFG, params, seed=6)
        assert res.loss.item() != mae.full_mse(res.pred, res.target).item()

    @pytest.mark.parametrize("name", ["encoder.patch_embed.w", "encoder.blocks.1.mlp.fc1.w",
                                      "decoder.mask_token", "decoder.embed.w", "decoder.pred.b",
                                      "encoder.cls_token"])
    def test_end_to_end_finite_difference(self, model, name):
        base, images = model
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in base.items()}
        res = mae.mae_step(images, CFG, params, seed=8)
        T.backward(res.loss)
        grad = params[name].grad.reshape(-1)
        flat = params[name].data.reshape(-1)
        h = 1e-5
        for i in np.random.default_rng(0).choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = mae.mae_step(images, CFG, params, seed=8).loss.item()
            flat[i] = old - h
            fm = mae.mae_step(images, CFG, params, seed=8).loss.item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            assert abs(num - grad[i]) <= 1e-4 * max(abs(num), abs(grad[i]), 1e-6)
