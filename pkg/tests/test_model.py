"""Model zoo contracts: shapes, variant semantics, bit-level reproducibility."""

import numpy as np
import pytest

import posrank.autodiff as ad
from posrank.autodiff import Tensor
from posrank.data import VOCAB_FIELDS
from posrank.errors import FormatError, UsageError
from posrank.model import (
    VARIANTS,
    ModelConfig,
    PreparedBatch,
    base_module_forward,
    behavior_embedding,
    build_model,
    combination_forward,
    interest_aggregation,
    load_checkpoint,
    pal_heads,
    position_interaction,
    predict_matrix,
    prepare_batch,
    save_checkpoint,
    score_displayed,
    transformer_encode,
)
from posrank.serving import synthetic_request

from conftest import desk_config, labeled_request, tiny_config


class TestBuildModel:
    def test_same_seed_same_bytes(self):
        cfg = tiny_config()
        a = build_model(cfg, "DPIN", seed=3)
        b = build_model(cfg, "DPIN", seed=3)
        assert a.names() == b.names()
        for name in a.names():
            assert a.tensors[name].data.tobytes() == b.tensors[name].data.tobytes()

    def test_din_has_no_position_machinery(self):
        params = build_model(tiny_config(), "DIN", seed=0)
        assert not any(n.startswith(("tf", "inter", "pos_att", "wide", "pal")) for n in params.names())

    def test_dpin_has_transformer_and_no_flat_attention(self):
        params = build_model(tiny_config(), "DPIN", seed=0)
        names = params.names()
        assert any(n.startswith("tf0.") for n in names)
        assert not any(n.startswith(("flat_att", "head", "wide", "pal")) for n in names)

    def test_head_divisibility_enforced(self):
        with pytest.raises(UsageError):
            build_model(tiny_config(d_model=9, heads=2), "DPIN", seed=0)

    def test_unknown_variant_lists_valid_tags(self):
        with pytest.raises(UsageError) as err:
            build_model(tiny_config(), "DeepFM", seed=0)
        for tag in VARIANTS:
            assert tag in str(err.value)

    def test_shared_submodules_have_identical_shapes(self):
        cfg = tiny_config()
        shapes = []
        for variant in VARIANTS:
            params = build_model(cfg, variant, seed=0)
            shared = {
                n: params.tensors[n].shape
                for n in params.names()
                if n.startswith(("embed.", "base."))
            }
            shapes.append(shared)
        assert all(s == shapes[0] for s in shapes[1:])

    def test_desk_dpin_parameter_count_matches_closed_form(self):
        sizes = {f: 64 for f in VOCAB_FIELDS}
        cfg = desk_config(vocab_sizes=sizes)
        params = build_model(cfg, "DPIN", seed=0)
        d, dm, k = 8, 32, 10
        embed = 8 * 64 * d + (k + 1) * d + 16 * d
        base = 64 * 64 + 64 + 64 * 32 + 32 + 32 * 16 + 16
        att = 88 * dm + dm + dm * 1 + 1
        inter = 96 * dm + dm
        per_block = 2 * 3 * dm * (dm // 2) + dm * dm + 2 * dm + dm * 4 * dm + 4 * dm + 4 * dm * dm + dm + 2 * dm
        comb = 56 * 16 + 16 + 16 * 1 + 1
        expected = embed + base + att + inter + 2 * per_block + comb
        assert params.total_parameters() == expected


class TestBaseModule:
    def test_single_item_matches_row_in_batch_bitwise(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=1)
        rng = np.random.default_rng(0)
        user = rng.integers(0, 12, size=(1, 2))
        ctx = rng.integers(0, 12, size=(1, 4))
        items = rng.integers(0, 12, size=(1, 5, 2))
        full = base_module_forward(params, user, ctx, items)
        for j in range(5):
            alone = base_module_forward(params, user, ctx, items[:, j : j + 1, :])
            assert alone.data[0].tobytes() == full.data[j].tobytes()

    def test_zero_embeddings_give_zero_representation(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=1)
        for name in params.names():
            if name.startswith("embed."):
                params.tensors[name].data[:] = 0.0
        out = base_module_forward(
            params,
            np.zeros((1, 2), dtype=np.int64),
            np.zeros((1, 4), dtype=np.int64),
            np.zeros((1, 3, 2), dtype=np.int64),
        )
        np.testing.assert_array_equal(out.data, np.zeros((3, cfg.item_rep_dim)))

    def test_desk_output_dim(self):
        cfg = desk_config()
        params = build_model(cfg, "DPIN", seed=0)
        out = base_module_forward(
            params,
            np.zeros((1, 2), dtype=np.int64),
            np.zeros((1, 4), dtype=np.int64),
            np.zeros((1, 2, 2), dtype=np.int64),
        )
        assert out.shape == (2, 16)


class TestBehaviorEmbedding:
    def test_dimension_at_embed_dim_8(self):
        params = build_model(desk_config(), "DPIN", seed=0)
        out = behavior_embedding(
            params,
            np.zeros((3, 2), dtype=np.int64),
            np.zeros((3, 4), dtype=np.int64),
            np.zeros(3, dtype=np.int64),
        )
        assert out.shape == (3, 56)

    def test_identical_records_identical_vectors(self):
        params = build_model(tiny_config(), "DPIN", seed=0)
        ids = (np.array([[3, 4], [3, 4]]), np.array([[1, 2, 3, 4], [1, 2, 3, 4]]), np.array([5, 5]))
        out = behavior_embedding(params, *ids)
        assert out.data[0].tobytes() == out.data[1].tobytes()

    def test_padding_record_is_id_zero_concat(self):
        params = build_model(tiny_config(), "DPIN", seed=0)
        out = behavior_embedding(
            params,
            np.zeros((1, 2), dtype=np.int64),
            np.zeros((1, 4), dtype=np.int64),
            np.zeros(1, dtype=np.int64),
        )
        d = params.config.embed_dim
        expected = np.concatenate(
            [params.tensors[f"embed.{f}"].data[0] for f in ("item_id", "category", "query", "geo", "hour", "dow")]
            + [params.tensors["embed.time_bucket"].data[0]]
        )
        np.testing.assert_array_equal(out.data[0], expected)
        assert out.shape[1] == 7 * d


class TestInterestAggregation:
    def _setup(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=2)
        rng = np.random.default_rng(1)
        emb = Tensor(rng.normal(size=(2, cfg.max_len, cfg.behavior_dim)))
        query = Tensor(rng.normal(size=(2, cfg.context_dim)))
        return cfg, params, emb, query

    def test_single_record_passes_through(self):
        cfg, params, emb, query = self._setup()
        mask = np.zeros((2, cfg.max_len))
        mask[:, 0] = 1.0
        out = interest_aggregation(params, emb, mask, query)
        np.testing.assert_array_equal(out.data[0], emb.data[0, 0])
        np.testing.assert_array_equal(out.data[1], emb.data[1, 0])

    def test_equal_logits_average(self):
        cfg, params, emb, query = self._setup()
        params.tensors["pos_att.wa"].data[:] = 0.0
        params.tensors["pos_att.wb"].data[:] = 0.0
        mask = np.zeros((2, cfg.max_len))
        mask[:, :3] = 1.0
        out = interest_aggregation(params, emb, mask, query)
        np.testing.assert_allclose(out.data, emb.data[:, :3].mean(axis=1), atol=1e-15)

    def test_all_padding_pools_to_zero(self):
        cfg, params, emb, query = self._setup()
        mask = np.zeros((2, cfg.max_len))
        out = interest_aggregation(params, emb, mask, query)
        np.testing.assert_array_equal(out.data, np.zeros((2, cfg.behavior_dim)))


class TestPositionInteraction:
    def test_output_dim_is_d_model(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=0)
        rng = np.random.default_rng(2)
        out = position_interaction(
            params,
            np.array([1, 2]),
            Tensor(rng.normal(size=(2, cfg.context_dim))),
            Tensor(rng.normal(size=(2, cfg.behavior_dim))),
        )
        assert out.shape == (2, cfg.d_model)

    def test_zero_weights_positive_bias_constant(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=0)
        params.tensors["inter.wv"].data[:] = 0.0
        params.tensors["inter.bv"].data[:] = 0.7
        rng = np.random.default_rng(3)
        out = position_interaction(
            params,
            np.array([1, 3]),
            Tensor(rng.normal(size=(2, cfg.context_dim))),
            Tensor(rng.normal(size=(2, cfg.behavior_dim))),
        )
        np.testing.assert_array_equal(out.data, np.full((2, cfg.d_model), 0.7))

    def test_position_changes_output(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=0)
        rng = np.random.default_rng(4)
        ctx = Tensor(rng.normal(size=(1, cfg.context_dim)))
        pooled = Tensor(rng.normal(size=(1, cfg.behavior_dim)))
        a = position_interaction(params, np.array([1]), ctx, pooled)
        b = position_interaction(params, np.array([2]), ctx, pooled)
        assert not np.array_equal(a.data, b.data)


class TestTransformer:
    def test_wrong_row_count_rejected(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=0)
        with pytest.raises(UsageError):
            transformer_encode(params, Tensor(np.zeros((1, cfg.max_position + 1, cfg.d_model))))

    def test_single_position_runs(self):
        cfg = tiny_config(max_position=1)
        params = build_model(cfg, "DPIN", seed=0)
        rng = np.random.default_rng(5)
        v = Tensor(rng.normal(size=(2, 1, cfg.d_model)))
        out = transformer_encode(params, v)
        assert out.shape == (2, 1, cfg.d_model)
        again = transformer_encode(params, Tensor(v.data.copy()))
        assert out.data.tobytes() == again.data.tobytes()

    def test_duplicate_inputs_get_identical_outputs(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=0)
        rng = np.random.default_rng(6)
        v = rng.normal(size=(1, cfg.max_position, cfg.d_model))
        v[0, 2] = v[0, 0]  # positions 0 and 2 share the same input row
        out = transformer_encode(params, Tensor(v)).data
        assert out[0, 0].tobytes() == out[0, 2].tobytes()

    def test_head_dim_split(self):
        cfg = desk_config(d_model=64, heads=2)
        params = build_model(cfg, "DPIN", seed=0)
        assert params.tensors["tf0.wq0"].shape == (64, 32)


class TestCombination:
    def test_zero_weights_give_half(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=0)
        params.tensors["comb.w1"].data[:] = 0.0
        params.tensors["comb.b1"].data[:] = 0.0
        params.tensors["comb.w2"].data[:] = 0.0
        params.tensors["comb.b2"].data[:] = 0.0
        rng = np.random.default_rng(7)
        out = combination_forward(
            params,
            Tensor(rng.normal(size=(4, cfg.item_rep_dim))),
            Tensor(rng.normal(size=(4, cfg.d_model))),
            np.array([1, 2, 3, 1]),
        )
        np.testing.assert_array_equal(out.data, np.full(4, 0.5))

    def test_outputs_strictly_inside_unit_interval(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=0)
        rng = np.random.default_rng(8)
        out = combination_forward(
            params,
            Tensor(rng.normal(size=(64, cfg.item_rep_dim)) * 10),
            Tensor(rng.normal(size=(64, cfg.d_model)) * 10),
            rng.integers(1, cfg.max_position + 1, size=64),
        )
        assert np.all(out.data > 0) and np.all(out.data < 1)


class TestPredictMatrix:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_entries_in_unit_interval(self, variant):
        cfg = tiny_config()
        params = build_model(cfg, variant, seed=9)
        req = synthetic_request(cfg, 5, seed=11)
        m = predict_matrix(params, req)
        assert m.shape == (5, cfg.max_position)
        assert np.all(m > 0) and np.all(m < 1)

    def test_din_columns_identical(self):
        cfg = tiny_config()
        params = build_model(cfg, "DIN", seed=9)
        m = predict_matrix(params, synthetic_request(cfg, 4, seed=12))
        for k in range(1, cfg.max_position):
            np.testing.assert_array_equal(m[:, k], m[:, 0])

    def test_wide_rank_invariance_across_positions(self):
        cfg = tiny_config()
        for variant in ("DIN+PosInWide", "DIN+ActualPosInWide"):
            params = build_model(cfg, variant, seed=9)
            rng = np.random.default_rng(13)
            params.tensors["wide.position"].data[:] = rng.normal(size=(cfg.max_position + 1, 1))
            m = predict_matrix(params, synthetic_request(cfg, 6, seed=13))
            base_order = np.argsort(m[:, 0])
            for k in range(cfg.max_position):
                np.testing.assert_array_equal(np.argsort(m[:, k]), base_order)

    def test_pal_is_an_outer_product_of_heads(self):
        cfg = tiny_config()
        params = build_model(cfg, "DIN+PAL", seed=9)
        rng = np.random.default_rng(14)
        params.tensors["pal.seen"].data[:] = rng.normal(size=(cfg.max_position + 1, 1))
        req = synthetic_request(cfg, 4, seed=14)
        m = predict_matrix(params, req)
        p_click, p_seen = pal_heads(params, req)
        np.testing.assert_array_equal(m, np.outer(p_click, p_seen))
        assert p_seen.shape == (cfg.max_position,)

    def test_dpin_rows_survive_candidate_removal_bitwise(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=9)
        req = synthetic_request(cfg, 5, seed=15)
        full = predict_matrix(params, req)
        smaller = synthetic_request(cfg, 5, seed=15)
        removed = 2
        smaller.candidates = [c for j, c in enumerate(req.candidates) if j != removed]
        sub = predict_matrix(params, smaller)
        kept = [j for j in range(5) if j != removed]
        assert sub.tobytes() == full[kept].tobytes()

    def test_factorization_fast_path_equals_definitional_path(self):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=9)
        req = synthetic_request(cfg, 4, seed=16)
        matrix = predict_matrix(params, req)
        from posrank.model import _dpin_position_rep

        prep = prepare_batch([req], cfg)
        with ad.no_grad():
            base = base_module_forward(
                params, prep.user_ids, prep.context_ids, prep.item_ids.reshape(1, 4, -1)
            )
            r_pos = _dpin_position_rep(params, prep, per_item=False)
            for j in range(4):
                for k in range(1, cfg.max_position + 1):
                    single = combination_forward(
                        params,
                        Tensor(base.data[j : j + 1]),
                        Tensor(r_pos.data[k - 1 : k]),
                        np.array([k]),
                    )
                    assert single.data[0] == matrix[j, k - 1]

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_score_displayed_matches_matrix_at_logged_positions(self, variant):
        cfg = tiny_config()
        params = build_model(cfg, variant, seed=10)
        req = labeled_request(cfg, seed=17)
        prep = prepare_batch([req], cfg)
        with ad.no_grad():
            scored = score_displayed(params, prep).data
        m = predict_matrix(params, req)
        for s, (j, k) in enumerate(zip(range(len(req.candidates)), req.positions)):
            assert scored[s] == pytest.approx(m[j, k - 1], abs=1e-12)


class TestCheckpoints:
    @pytest.mark.parametrize("variant", ["DPIN", "DIN+PAL", "DIN+PosInWide"])
    def test_round_trip_bit_identical(self, tmp_path, variant):
        cfg = tiny_config()
        params = build_model(cfg, variant, seed=21)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.variant == variant
        assert loaded.config == cfg
        for name in params.names():
            assert loaded.tensors[name].data.tobytes() == params.tensors[name].data.tobytes()

    def test_round_trip_preserves_predictions(self, tmp_path):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=22)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        for seed in range(5):
            req = synthetic_request(cfg, 3, seed=seed)
            assert predict_matrix(loaded, req).tobytes() == predict_matrix(params, req).tobytes()

    def test_truncated_file_rejected(self, tmp_path):
        cfg = tiny_config()
        params = build_model(cfg, "DPIN", seed=23)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 17])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestGradientFidelity:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_end_to_end_gradients(self, variant):
        cfg = tiny_config()
        requests = [labeled_request(cfg, seed=s) for s in (31, 32)]
        prep = prepare_batch(requests, cfg)
        params = build_model(cfg, variant, seed=30)

        def build_loss(tensors):
            return ad.binary_cross_entropy(score_displayed(params, prep), prep.clicks)

        err = ad.gradient_check(build_loss, params.tensors, epsilon=1e-6, max_coords_per_tensor=6)
        assert err < 1e-5, f"{variant}: max relative error {err:.2e}"
