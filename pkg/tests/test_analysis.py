import io
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from styleswap.analysis import (AttentionMap, ContentOracleNet, GateResult,
                                MetricReport, SWEEP_CSV_HEADER, attention_map,
                                cfg_directional_check, content_alignment,
                                content_probs, conv_features, diversity,
                                evaluate_policies, grid_manifest_hash, leakage,
                                make_eval_grid, oracle_gates, region_averaged_map,
                                render_heatmap, report_header, require_gates,
                                select_knee, style_descriptor, style_similarity,
                                sweep_start_layer, write_sweep_csv)
from styleswap.defaults import DEFAULT_MODEL_SPEC
from styleswap.scheduler import SamplerConfig, make_schedule, sample
from styleswap.swap import StyledRun, SwapPolicy
from styleswap.toytrain import ToyDatasetSpec, generate_dataset, render_sample
from styleswap.unet import Condition, build_model

DATA_DIR = Path(__file__).parent / "data"


def _img(seed, size=32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=gen) * 2 - 1


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(ToyDatasetSpec(samples_per_cell=2, rng_seed=9))


class TestStyleSimilarity:
    def test_self_similarity_is_one(self):
        img = render_sample(ToyDatasetSpec(), 0, 0, 0)
        assert style_similarity(img, img) == pytest.approx(1.0, abs=1e-6)

    def test_symmetric(self):
        a, b = _img(0), _img(1)
        assert style_similarity(a, b) == pytest.approx(style_similarity(b, a),
                                                       abs=1e-7)

    def test_range(self):
        for seed in range(20):
            v = style_similarity(_img(2 * seed), _img(2 * seed + 1))
            assert -1.0 <= v <= 1.0

    def test_same_style_beats_other_styles(self, small_dataset):
        # per anchor: mean similarity to same-style/different-content images
        # must exceed mean similarity to different-style images (>= 95%)
        descs = torch.stack([style_descriptor(im) for im in small_dataset.images])
        descs = descs / torch.linalg.vector_norm(descs, dim=1, keepdim=True)
        sims = descs @ descs.T
        styles, contents = small_dataset.style_ids, small_dataset.content_ids
        hits = 0
        for i in range(len(small_dataset)):
            same = (styles == styles[i]) & (contents != contents[i])
            diff = styles != styles[i]
            hits += int(sims[i][same].mean() > sims[i][diff].mean())
        assert hits / len(small_dataset) >= 0.95

    def test_descriptor_structure(self):
        d = style_descriptor(_img(5))
        assert d.shape == (8 ** 3 + 64,)
        assert torch.linalg.vector_norm(d[:512]) == pytest.approx(1.0, abs=1e-5)
        assert torch.linalg.vector_norm(d[512:]) == pytest.approx(1.0, abs=1e-5)

    def test_conv_features_shape_errors(self):
        with pytest.raises(ValueError):
            conv_features(torch.ones(1, 32, 32))


class TestContentOracle:
    def test_probabilities_sum_to_one(self):
        probs = content_probs(_img(0))
        assert probs.shape == (6,)
        assert float(probs.sum()) == pytest.approx(1.0, abs=1e-5)

    def test_dataset_top1_accuracy(self, small_dataset):
        probs = content_probs(small_dataset.images)
        acc = float((probs.argmax(dim=1) == small_dataset.content_ids).float().mean())
        assert acc >= 0.95

    def test_noise_calibration(self):
        gen = torch.Generator().manual_seed(0)
        noise = torch.rand(64, 3, 32, 32, generator=gen) * 2 - 1
        probs = content_probs(noise)
        assert float(probs.max()) <= 0.5

    def test_alignment_range_error(self):
        with pytest.raises(ValueError):
            content_alignment(_img(0), 6)

    def test_deterministic(self):
        img = _img(3)
        assert torch.equal(content_probs(img), content_probs(img))


class TestLeakage:
    def test_same_category_is_zero_by_convention(self):
        assert leakage(_img(0), 2, 2) == 0.0

    def test_reference_category_image_leaks(self, small_dataset):
        # dataset images of the reference category -> leakage near 1
        vals = [leakage(img, ref_content=int(c), orig_content=(int(c) + 1) % 6)
                for img, c in zip(small_dataset.images[:24],
                                  small_dataset.content_ids[:24])]
        assert np.mean(vals) > 0.9

    def test_original_category_image_stays_low(self, small_dataset):
        vals = [leakage(img, ref_content=(int(c) + 1) % 6, orig_content=int(c))
                for img, c in zip(small_dataset.images[:24],
                                  small_dataset.content_ids[:24])]
        assert np.mean(vals) < 0.1

    def test_range(self):
        for seed in range(10):
            assert 0.0 <= leakage(_img(seed), 0, 1) <= 1.0


class TestDiversity:
    def test_identical_images_zero(self):
        img = _img(0)
        assert diversity([img, img.clone(), img.clone()]) == 0.0

    def test_fewer_than_two_images(self):
        assert diversity([]) == 0.0
        assert diversity([_img(0)]) == 0.0

    def test_permutation_invariant(self):
        imgs = [_img(s) for s in range(4)]
        a = diversity(imgs)
        b = diversity([imgs[2], imgs[0], imgs[3], imgs[1]])
        assert a == pytest.approx(b, abs=1e-7)

    def test_three_image_mean_of_pairs(self):
        # diversity of two images is their single pairwise distance, so the
        # 3-image value must be the arithmetic mean of the three pairs
        a, b, c = _img(10), _img(11), _img(12)
        expected = (diversity([a, b]) + diversity([a, c]) + diversity([b, c])) / 3
        assert diversity([a, b, c]) == pytest.approx(expected, abs=1e-7)

    def test_positive_for_distinct_images(self):
        assert diversity([_img(0), _img(1)]) > 0.0


class TestOracleGates:
    def test_gates_pass_on_committed_oracle(self, gate_dataset):
        gate = require_gates(gate_dataset)
        assert gate.style_accuracy >= 0.95
        assert gate.content_accuracy >= 0.95
        assert gate.passed

    def test_untrained_oracle_fails_gates(self, small_dataset):
        gen = torch.Generator().manual_seed(0)
        blank = ContentOracleNet()
        with torch.no_grad():
            for p in blank.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
        with pytest.raises(RuntimeError, match="not trustworthy"):
            require_gates(small_dataset, oracle=blank)

    def test_gate_result_threshold(self):
        assert GateResult(0.96, 0.95, 10).passed
        assert not GateResult(0.94, 1.0, 10).passed
        assert not GateResult(1.0, 0.9, 10).passed


def _fake_run(q, k):
    return StyledRun(image=torch.zeros(3, 2, 2), result=None,
                     attn_records={(20, 5): {"q": q, "k": k}})


class TestAttentionMap:
    def test_rows_sum_to_one(self):
        gen = torch.Generator().manual_seed(0)
        run = _fake_run(torch.randn(9, 8, generator=gen),
                        torch.randn(12, 8, generator=gen))
        amap = attention_map(run, ordinal=5, step=20, num_heads=2)
        assert amap.map.shape == (9, 12)
        assert torch.allclose(amap.map.sum(dim=1), torch.ones(9), atol=1e-5)

    def test_identical_queries_identical_rows(self):
        gen = torch.Generator().manual_seed(1)
        q = torch.randn(1, 8, generator=gen).expand(5, 8)
        run = _fake_run(q, torch.randn(7, 8, generator=gen))
        amap = attention_map(run, ordinal=5, step=20, num_heads=2)
        assert torch.equal(amap.map, amap.map[0].expand_as(amap.map))

    def test_missing_trace_errors(self):
        run = _fake_run(torch.randn(4, 8), torch.randn(4, 8))
        with pytest.raises(ValueError, match="no attention trace"):
            attention_map(run, ordinal=3, step=20, num_heads=2)
        bare = StyledRun(image=torch.zeros(1), result=None)
        with pytest.raises(ValueError, match="record_attention"):
            attention_map(bare, ordinal=5, step=20, num_heads=2)

    def test_row_stochastic_enforced(self):
        with pytest.raises(ValueError):
            AttentionMap(ordinal=0, step=0, map=torch.full((2, 3), 0.5))


class TestRegionAveragedMap:
    def _map(self):
        gen = torch.Generator().manual_seed(2)
        m = torch.rand(4, 6, generator=gen)
        return m / m.sum(dim=1, keepdim=True)

    def test_single_point_is_that_row(self):
        m = self._map()
        mask = torch.tensor([0, 0, 1, 0])
        assert torch.equal(region_averaged_map(m, mask), m[2])

    def test_full_mask_is_column_mean(self):
        m = self._map()
        out = region_averaged_map(m, torch.ones(4))
        assert torch.allclose(out, m.mean(dim=0), atol=1e-7)

    def test_two_point_hand_average(self):
        m = self._map()
        out = region_averaged_map(m, torch.tensor([1, 0, 0, 1]))
        assert torch.allclose(out, (m[0] + m[3]) / 2, atol=1e-7)

    def test_stays_row_stochastic(self):
        out = region_averaged_map(self._map(), torch.tensor([1, 1, 0, 0]))
        assert float(out.sum()) == pytest.approx(1.0, abs=1e-5)

    def test_errors(self):
        m = self._map()
        with pytest.raises(ValueError):
            region_averaged_map(m, torch.zeros(4))
        with pytest.raises(ValueError):
            region_averaged_map(m, torch.ones(5))


class TestRenderHeatmap:
    def _decode(self, png_bytes):
        from PIL import Image
        return np.asarray(Image.open(io.BytesIO(png_bytes)))

    def test_constant_map_uniform_pixels(self):
        arr = self._decode(render_heatmap(torch.full((4, 4), 0.25)))
        assert arr.shape == (4, 4)
        assert len(np.unique(arr)) == 1

    def test_max_cell_brightest(self):
        m = torch.tensor([[0.0, 0.1], [0.2, 0.7]])
        arr = self._decode(render_heatmap(m))
        assert arr[1, 1] == 255
        assert arr[0, 0] == 0
        assert arr.argmax() == 3

    def test_scale_factor(self):
        arr = self._decode(render_heatmap(torch.eye(3), scale=8))
        assert arr.shape == (24, 24)
        assert (arr[:8, :8] == 255).all()

    def test_vector_reshaped_to_square(self):
        arr = self._decode(render_heatmap(torch.arange(16.0)))
        assert arr.shape == (4, 4)

    def test_golden_image(self):
        gen = torch.Generator().manual_seed(13)
        m = torch.rand(8, 8, generator=gen)
        arr = self._decode(render_heatmap(m, scale=4))
        golden = self._decode((DATA_DIR / "heatmap_golden.png").read_bytes())
        assert np.array_equal(arr, golden)


class TestEvalGrid:
    def test_pinned_grid_contents(self):
        grid = make_eval_grid(base_seed=100)
        assert len(grid) == 20
        # independently derived expectations for the first reference block
        first = grid[:5]
        assert [p.orig_content for p in first] == [0, 5, 2, 3, 4]
        assert all(p.ref_style == 0 and p.ref_content == 1 and p.ref_seed == 1100
                   for p in first)
        assert [p.orig_seed for p in grid] == list(range(100, 120))

    def test_reference_content_never_equals_original(self):
        for p in make_eval_grid():
            assert p.ref_content != p.orig_content

    def test_hash_is_stable_and_seed_sensitive(self):
        a = grid_manifest_hash(make_eval_grid(base_seed=100))
        b = grid_manifest_hash(make_eval_grid(base_seed=100))
        c = grid_manifest_hash(make_eval_grid(base_seed=101))
        assert a == b
        assert a != c
        assert len(a) == 64


class TestMetricReport:
    def test_standard_error_hand_case(self):
        rep = MetricReport(0.0, 0.0, 0.0, 0.0, 4, "h",
                           style_similarity_values=(1.0, 2.0, 3.0, 4.0))
        # std([1..4], ddof=1)/sqrt(4) = sqrt(5/3)/2
        assert rep.style_similarity_se == pytest.approx(math.sqrt(5 / 3) / 2,
                                                        abs=1e-12)

    def test_no_values_zero_se(self):
        assert MetricReport(0, 0, 0, 0, 0, "h").style_similarity_se == 0.0


class TestSelectKnee:
    def _rows(self, sims, leaks):
        return [(s, MetricReport(sim, 0.5, 0.1, leak, 4, "h"))
                for s, (sim, leak) in enumerate(zip(sims, leaks), start=3)]

    def test_largest_qualifying_s(self):
        rows = self._rows([1.0, 0.95, 0.92, 0.85], [0.7, 0.5, 0.3, 0.2])
        assert select_knee(rows, knee_frac=0.9, leakage_ceiling=0.6) == 5

    def test_leakage_ceiling_filters(self):
        rows = self._rows([1.0, 0.99, 0.98], [0.5, 0.65, 0.7])
        assert select_knee(rows, knee_frac=0.9, leakage_ceiling=0.6) == 3

    def test_no_candidate_raises_with_diagnostics(self):
        rows = self._rows([1.0, 0.5], [0.9, 0.9])
        with pytest.raises(RuntimeError, match="knee rule"):
            select_knee(rows, knee_frac=0.9, leakage_ceiling=0.6)


@pytest.fixture(scope="module")
def visible_model():
    m = build_model(DEFAULT_MODEL_SPEC).eval()
    with torch.no_grad():
        m.out_conv.weight.copy_(
            torch.randn(m.out_conv.weight.shape,
                        generator=torch.Generator().manual_seed(21)) * 0.05)
    for p in m.parameters():
        p.requires_grad_(False)
    return m


@pytest.fixture(scope="module")
def sweep_result(visible_model, small_dataset):
    grid = make_eval_grid(num_refs=1, contents_per_ref=2, base_seed=300)
    cfg = SamplerConfig(num_inference_steps=3, guidance_scale=2.0)
    return sweep_start_layer(visible_model, grid, cfg, make_schedule(100),
                             small_dataset), grid, cfg


class TestSweep:
    def test_rows_cover_up_ordinals_plus_vanilla(self, sweep_result):
        result, _, _ = sweep_result
        assert [s for s, _ in result.rows] == [3, 4, 5, 6, 7]
        assert result.selected_s in (3, 4, 5, 6, 7)
        for _, rep in result.rows:
            assert rep.n_pairs == 2
            assert math.isfinite(rep.style_similarity)

    def test_locality_verified_at_every_sweep_point(self, sweep_result):
        result, _, _ = sweep_result
        # 1 ref x 5 sweep points x 3 steps x 3 down/mid layers x q/k/v
        assert result.locality_checks == 5 * 3 * 3 * 3

    def test_vanilla_row_matches_direct_sampling(self, sweep_result, visible_model):
        result, grid, cfg = sweep_result
        schedule = make_schedule(100)
        from dataclasses import replace
        ref_cfg = replace(cfg, rng_seed=grid[0].ref_seed)
        ref = sample(visible_model,
                     Condition(content_id=grid[0].ref_content,
                               style_id=grid[0].ref_style), ref_cfg, schedule)
        sims = []
        for pair in grid:
            run = sample(visible_model, Condition(content_id=pair.orig_content),
                         replace(cfg, rng_seed=pair.orig_seed), schedule)
            sims.append(style_similarity(run.image, ref.image))
        assert result.row(7).style_similarity == pytest.approx(
            float(np.mean(sims)), abs=1e-7)

    def test_csv_schema(self, sweep_result, tmp_path):
        result, _, _ = sweep_result
        path = tmp_path / "sweep.csv"
        write_sweep_csv(result, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == SWEEP_CSV_HEADER
        assert len(lines) == 1 + len(result.rows)
        for line, (s, rep) in zip(lines[1:], result.rows):
            cells = line.split(",")
            assert int(cells[0]) == s
            assert float(cells[1]) == pytest.approx(rep.style_similarity, abs=1e-8)
            assert int(cells[5]) == rep.n_pairs
            assert cells[6] == rep.seed_manifest_hash

    def test_failing_gates_block_the_sweep(self, visible_model, small_dataset):
        blank = ContentOracleNet()
        grid = make_eval_grid(num_refs=1, contents_per_ref=1)
        with pytest.raises(RuntimeError, match="not trustworthy"):
            sweep_start_layer(visible_model, grid,
                              SamplerConfig(num_inference_steps=2),
                              make_schedule(100), small_dataset, oracle=blank)

    def test_empty_grid_rejected(self, visible_model, small_dataset):
        with pytest.raises(ValueError, match="empty"):
            sweep_start_layer(visible_model, (), SamplerConfig(), make_schedule(100),
                              small_dataset)


class TestEvaluatePolicies:
    def test_reports_per_policy(self, visible_model):
        grid = make_eval_grid(num_refs=1, contents_per_ref=2, base_seed=400)
        cfg = SamplerConfig(num_inference_steps=3, guidance_scale=2.0)
        reports = evaluate_policies(
            visible_model, make_schedule(100), cfg,
            [SwapPolicy(mode="swap_kv"), SwapPolicy(mode="none")], grid)
        assert set(reports) == {"swap_kv", "none"}
        for rep in reports.values():
            assert rep.n_pairs == 2
            assert len(rep.style_similarity_values) == 2
            assert rep.seed_manifest_hash == grid_manifest_hash(grid)

    def test_empty_grid_rejected(self, visible_model):
        with pytest.raises(ValueError):
            evaluate_policies(visible_model, make_schedule(100), SamplerConfig(),
                              [SwapPolicy(mode="none")], ())


class TestReportHeader:
    def test_header_records_substitution_and_hashes(self):
        header = report_header({"extra_key": 1})
        assert "toy descriptors" in header["substitution"]
        assert "content_oracle.ckpt" in header["oracle_checkpoints"]
        assert len(header["oracle_checkpoints"]["content_oracle.ckpt"]) == 64
        assert header["extra_key"] == 1


class TestCfgDirectional:
    def test_returns_accuracy_pair(self, visible_model):
        cfg = SamplerConfig(num_inference_steps=2)
        accs = cfg_directional_check(visible_model, make_schedule(100), cfg,
                                     num_contents=2, seeds_per_content=1)
        assert len(accs) == 2
        assert all(0.0 <= a <= 1.0 for a in accs)

    def test_deterministic(self, visible_model):
        cfg = SamplerConfig(num_inference_steps=2)
        kwargs = dict(num_contents=2, seeds_per_content=1)
        a = cfg_directional_check(visible_model, make_schedule(100), cfg, **kwargs)
        b = cfg_directional_check(visible_model, make_schedule(100), cfg, **kwargs)
        assert a == b


@pytest.mark.trained
class TestAttentionMapGolden:
    # sha256 of the committed golden container, frozen when it was generated
    GOLDEN_SHA = "86d0afdb7c16f3022302465912258796746396fe5fc14796d07ec1868510e2de"

    def test_pinned_map_matches_committed_golden(self, trained_model, schedule):
        from styleswap.checkpoint import file_sha256, load_tensors
        from styleswap.swap import ReferenceSource, run_reference, run_styled

        golden_path = DATA_DIR / "attnmap_golden.ckpt"
        assert file_sha256(golden_path) == self.GOLDEN_SHA
        golden, meta = load_tensors(golden_path)

        config = SamplerConfig(num_inference_steps=25, guidance_scale=7.0,
                               eta=0.0, rng_seed=11)
        ref_cfg = SamplerConfig(num_inference_steps=25, guidance_scale=7.0,
                                eta=0.0, rng_seed=1011)
        _, cap = run_reference(
            trained_model, ReferenceSource(cond=Condition(content_id=1, style_id=3)),
            ref_cfg, schedule)
        run = run_styled(trained_model, Condition(content_id=0), cap,
                         SwapPolicy(mode="swap_kv", start_ordinal=5),
                         config, schedule, record_attention=True)
        amap = attention_map(run, 5, 20, num_heads=trained_model.spec.num_heads)
        assert torch.equal(amap.map.to(torch.float32), golden["map"])
