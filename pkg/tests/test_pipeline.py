import numpy as np
import pytest

from nvg.backbone import ModelConfig
from nvg.content_model import ContentModel
from nvg.errors import InvariantError
from nvg.grid import ContentTokens, StructureMap
from nvg.hierarchy import build_hierarchy
from nvg.pipeline import (
    GenerationRequest,
    ScheduleParams,
    cfg_schedule,
    forced_final_split,
    generate,
    sample_token,
    top_p_schedule,
)
from nvg.quantize import build_contents, fit_codebook, identity_refiners, reconstruct
from nvg.structure_model import StructureModel
from nvg.synthetic import SyntheticSpec, make_synthetic_dataset

H = W = 4
E = 3
LAST = 4
CLASSES = 2


@pytest.fixture(scope="module")
def setup():
    data = make_synthetic_dataset(SyntheticSpec(count=4, h=H, w=W, e=E,
                                                num_classes=CLASSES, seed=11))
    grids = [g for _, g in data]
    codebook = fit_codebook(grids, 16, seed=0)
    refiners = identity_refiners(LAST, E)
    content = ContentModel(ModelConfig(2, "content", E, 16, CLASSES, LAST), seed=0)
    structure = StructureModel(ModelConfig(2, "structure", E, 1, CLASSES, LAST), seed=0)
    return data, codebook, refiners, content, structure


class TestSchedules:
    def test_cfg_content_endpoints(self):
        assert cfg_schedule(0, "content", 8) == pytest.approx(1.0)
        assert cfg_schedule(8, "content", 8) == pytest.approx(3.5)
        assert cfg_schedule(4, "content", 8) == pytest.approx(2.25)

    def test_cfg_structure_endpoints(self):
        assert cfg_schedule(1, "structure", 8) == pytest.approx(1.0)
        assert cfg_schedule(7, "structure", 8) == pytest.approx(2.5)

    def test_cfg_structure_range_checked(self):
        with pytest.raises(InvariantError):
            cfg_schedule(0, "structure", 8)
        with pytest.raises(InvariantError):
            cfg_schedule(8, "structure", 8)

    def test_top_p_endpoints_and_midpoint(self):
        assert top_p_schedule(0, 8) == pytest.approx(1.0)
        assert top_p_schedule(8, 8) == pytest.approx(0.5)
        assert top_p_schedule(4, 8) == pytest.approx(0.7071, abs=1e-4)


class TestSampleToken:
    def test_degenerate_logit_wins(self):
        logits = np.zeros(16)
        logits[11] = 1e6
        for seed in range(5):
            assert sample_token(logits, 0.7, seed) == 11

    def test_p_one_covers_support(self):
        logits = np.zeros(4)
        rng = np.random.default_rng(0)
        seen = {sample_token(logits, 1.0, rng) for _ in range(200)}
        assert seen == {0, 1, 2, 3}

    def test_uniform_logits_half_mass_keeps_lowest_32(self):
        logits = np.zeros(64)
        rng = np.random.default_rng(1)
        picks = {sample_token(logits, 0.5, rng) for _ in range(3000)}
        assert max(picks) <= 31
        assert picks == set(range(32))

    def test_invalid_p(self):
        with pytest.raises(InvariantError):
            sample_token(np.zeros(4), 0.0, 0)


class TestForcedFinalSplit:
    def test_smallest_location_gets_even_label(self):
        parent = StructureMap(1, np.array([[0, 1], [1, 0]]))
        child = forced_final_split(parent)
        # cluster 0 covers (0,0) and (1,1): the first gets 0, second 1
        assert child.labels[0, 0] == 0 and child.labels[1, 1] == 1
        assert child.labels[0, 1] == 2 and child.labels[1, 0] == 3


class TestGenerate:
    def test_full_override_reproduces_reconstruction_bit_exactly(self, setup):
        data, codebook, refiners, content, structure = setup
        cls, grid = data[0]
        hierarchy = build_hierarchy(grid)
        seq, _ = build_contents(grid, hierarchy, codebook, refiners)
        req = GenerationRequest(
            class_id=cls, seed=9, h=H, w=W, e=E,
            structure_overrides={i: smap for i, (_, smap) in enumerate(seq.stages)},
            content_overrides={i: tok for i, (tok, _) in enumerate(seq.stages)},
            schedule=ScheduleParams(flow_steps=2),
        )
        result = generate(req, content, structure, codebook, refiners)
        recon = reconstruct(seq, codebook, refiners)
        assert np.array_equal(result.canvas.data, recon.data)
        assert result.stats.content_steps == 0
        assert result.stats.flow_steps == 0

    def test_structure_override_at_stage1_respected(self, setup):
        _, codebook, refiners, content, structure = setup
        half = StructureMap(1, np.repeat([0, 1], H * W // 2).reshape(H, W))
        req = GenerationRequest(class_id=0, seed=3, h=H, w=W, e=E,
                                structure_overrides={1: half},
                                schedule=ScheduleParams(flow_steps=2))
        result = generate(req, content, structure, codebook, refiners)
        assert np.array_equal(result.sequence.stages[1][1].labels, half.labels)
        # deeper stages stay parent-consistent with the override
        for i in range(1, LAST):
            child = result.sequence.stages[i + 1][1].labels
            parent = result.sequence.stages[i][1].labels
            assert np.array_equal(child >> 1, parent)

    def test_determinism(self, setup):
        _, codebook, refiners, content, structure = setup
        req = GenerationRequest(class_id=1, seed=21, h=H, w=W, e=E,
                                schedule=ScheduleParams(flow_steps=3))
        r1 = generate(req, content, structure, codebook, refiners)
        r2 = generate(req, content, structure, codebook, refiners)
        assert np.array_equal(r1.canvas.data, r2.canvas.data)
        for (t1, s1), (t2, s2) in zip(r1.sequence.stages, r2.sequence.stages):
            assert np.array_equal(t1.indices, t2.indices)
            assert np.array_equal(s1.labels, s2.labels)

    def test_step_accounting(self, setup):
        _, codebook, refiners, content, structure = setup
        req = GenerationRequest(class_id=0, seed=5, h=H, w=W, e=E,
                                schedule=ScheduleParams(flow_steps=3))
        result = generate(req, content, structure, codebook, refiners)
        assert result.stats.content_steps == LAST + 1
        assert result.stats.flow_steps == (LAST - 1) * 3

    def test_generated_sequence_is_valid_and_balanced(self, setup):
        _, codebook, refiners, content, structure = setup
        req = GenerationRequest(class_id=0, seed=17, h=H, w=W, e=E,
                                schedule=ScheduleParams(flow_steps=2))
        result = generate(req, content, structure, codebook, refiners)
        hw = H * W
        for i, (tokens, smap) in enumerate(result.sequence.stages):
            assert tokens.indices.size == 2 ** i
            counts = np.bincount(smap.labels.ravel(), minlength=2 ** i)
            assert np.all(counts == hw // 2 ** i)

    def test_prefix_override_keeps_parent_consistency(self, setup):
        data, codebook, refiners, content, structure = setup
        cls, grid = data[1]
        seq, _ = build_contents(grid, build_hierarchy(grid), codebook, refiners)
        req = GenerationRequest(
            class_id=cls, seed=2, h=H, w=W, e=E,
            structure_overrides={i: seq.stages[i][1] for i in (0, 1, 2)},
            content_overrides={i: seq.stages[i][0] for i in (0, 1, 2)},
            schedule=ScheduleParams(flow_steps=2),
        )
        result = generate(req, content, structure, codebook, refiners)
        for i in (0, 1, 2):
            assert np.array_equal(result.sequence.stages[i][1].labels,
                                  seq.stages[i][1].labels)
        for i in range(LAST):
            assert np.array_equal(result.sequence.stages[i + 1][1].labels >> 1,
                                  result.sequence.stages[i][1].labels)

    def test_non_nested_overrides_rejected(self, setup):
        a = StructureMap(1, np.repeat([0, 1], H * W // 2).reshape(H, W))
        b_labels = np.zeros((H, W), dtype=np.int64)
        b_labels[0, :] = 2  # stage-2 cluster under the wrong parent
        b_labels[1, :] = 3
        b_labels[2, :] = 0
        b_labels[3, :] = 1
        with pytest.raises(InvariantError):
            GenerationRequest(class_id=0, seed=0, h=H, w=W, e=E,
                              structure_overrides={1: a, 2: StructureMap(2, b_labels)})

    def test_schedule_constant_overrides(self, setup):
        _, codebook, refiners, content, structure = setup
        req = GenerationRequest(class_id=0, seed=13, h=H, w=W, e=E,
                                schedule=ScheduleParams(flow_steps=2,
                                                        cfg_constant=1.5,
                                                        top_p_constant=0.9))
        result = generate(req, content, structure, codebook, refiners)
        assert result.stats.content_steps == LAST + 1
