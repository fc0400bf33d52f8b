import numpy as np
import pytest

from vbmtl.backbone import Backbone, BackboneConfig, HiddenStack
from vbmtl.diffcore import tensor as T
from vbmtl.diffcore.tensor import Tensor
from vbmtl.heads import (TASK_NAMES, TASKS, BranchHeads, ChainHeads, MissingTruthError, VanillaHeads, build_heads,
                         pool, stage_indices)
from vbmtl.metrics import cross_entropy

SHAPES = {"type": 8, "two": 2, "high": 10, "culture": 40}


def random_stack(rng, n=3, layers=4, frames=31, d=64):
    return HiddenStack([Tensor(rng.normal(size=(n, frames, d)), requires_grad=True) for _ in range(layers + 1)])


def truth(rng, n=3):
    return {"type": rng.integers(0, 8, n), "two": rng.uniform(size=(n, 2)), "high": rng.uniform(size=(n, 10)),
            "culture": rng.integers(0, 4, n)}


def test_task_specs():
    assert [(t.name, t.out_dim, t.kind) for t in TASKS] == [
        ("type", 8, "classification"), ("two", 2, "regression"), ("high", 10, "regression"),
        ("culture", 40, "regression")]


class TestPool:
    def test_single_frame(self):
        x = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(pool(x).data, [1.0, 2.0])

    def test_constant(self):
        np.testing.assert_array_equal(pool(np.full((5, 3), 0.4)).data, [0.4] * 3)

    def test_arithmetic(self):
        np.testing.assert_array_equal(pool(np.array([[1.0, 3.0], [3.0, 1.0]])).data, [2.0, 2.0])

    def test_zero_frames(self):
        with pytest.raises(ValueError):
            pool(np.zeros((0, 4)))


@pytest.mark.parametrize("arch", ["vanilla", "chain", "branch"])
def test_output_shapes_interchangeable(arch, rng):
    heads = build_heads(arch, 64, rng, 4).eval()
    out = heads(random_stack(rng))
    assert list(out) == list(TASK_NAMES)
    assert {k: v.shape for k, v in out.items()} == {k: (3, d) for k, d in SHAPES.items()}


def test_parameter_counts_golden(rng):
    counts = {a: build_heads(a, 64, rng, 4).num_parameters() for a in ("vanilla", "chain", "branch")}
    assert counts == {"vanilla": 81980, "chain": 91708, "branch": 350268}
    assert counts["vanilla"] < counts["chain"] < counts["branch"]


class TestVanilla:
    def test_zeroing_one_head_changes_only_it(self, rng):
        heads = VanillaHeads(64, rng)
        stack = random_stack(rng)
        before = {k: v.data.copy() for k, v in heads(stack).items()}
        for p in heads.task_parameters("high"):
            p.data = np.zeros_like(p.data)
        after = heads(stack)
        for t in TASK_NAMES:
            assert np.array_equal(before[t], after[t].data) == (t != "high")

    def test_type_loss_gives_no_grad_to_two_head(self, rng):
        heads = VanillaHeads(64, rng)
        out = heads(random_stack(rng))
        cross_entropy(out["type"], [0, 1, 2]).backward()
        assert all(p.grad is None or not p.grad.any() for p in heads.task_parameters("two"))
        assert any(p.grad is not None and p.grad.any() for p in heads.task_parameters("type"))


class TestChain:
    def test_input_widths(self, rng):
        assert ChainHeads(64, rng).in_widths == {"type": 64, "two": 72, "high": 74, "culture": 84}

    def test_train_without_truth(self, rng):
        with pytest.raises(MissingTruthError):
            ChainHeads(64, rng).train()(random_stack(rng))
        partial = truth(rng)
        del partial["high"]
        with pytest.raises(MissingTruthError):
            ChainHeads(64, rng).train()(random_stack(rng), partial)

    def test_conditioning_source(self, rng):
        heads = ChainHeads(64, rng)
        stack, y = random_stack(rng), truth(rng)
        heads.train()(stack, y)
        assert heads.conditioning_source == "truth"
        heads.eval()(stack)
        assert heads.conditioning_source == "prediction"

    def test_type_perturbation_reaches_downstream_only_in_eval(self, rng):
        heads = ChainHeads(64, rng)
        stack, y = random_stack(rng), truth(rng)
        ev0 = heads(stack, mode="eval")["two"].data.copy()
        tr0 = heads(stack, y, mode="train")["two"].data.copy()
        for p in heads.task_parameters("type"):
            p.data = p.data + 0.5
        assert not np.allclose(heads(stack, mode="eval")["two"].data, ev0)
        np.testing.assert_array_equal(heads(stack, y, mode="train")["two"].data, tr0)

    def test_truth_substitution_consistency(self, rng):
        heads = ChainHeads(64, rng)
        # saturate the type head so its softmax is exactly one-hot
        heads.nets["type"].out.weight.data = heads.nets["type"].out.weight.data * 1e6
        stack = random_stack(rng)
        ev = heads(stack, mode="eval")
        fed = {"type": np.argmax(ev["type"].data, axis=1), "two": ev["two"].data, "high": ev["high"].data,
               "culture": np.zeros(3)}
        np.testing.assert_array_equal(T.softmax(ev["type"]).data, np.eye(8)[fed["type"]])
        tr = heads(stack, fed, mode="train")
        for t in ("two", "high", "culture"):
            np.testing.assert_array_equal(tr[t].data, ev[t].data)

    def test_eval_depends_only_on_input(self, rng):
        heads = ChainHeads(64, rng).eval()
        stack = random_stack(rng)
        a = heads(stack, truth(rng))["culture"].data
        b = heads(stack, truth(rng))["culture"].data
        np.testing.assert_array_equal(a, b)

    def test_train_depends_on_truth(self, rng):
        heads = ChainHeads(64, rng).train()
        stack = random_stack(rng)
        assert not np.allclose(heads(stack, truth(rng))["culture"].data, heads(stack, truth(rng))["culture"].data)


class TestBranch:
    def test_stage_indices(self):
        assert stage_indices(4, 4) == [0, 1, 2, 3, 4]
        assert stage_indices(12, 4) == [0, 3, 6, 9, 12]
        assert stage_indices(4, 2) == [0, 2, 4]
        with pytest.raises(ValueError):
            stage_indices(4, 5)

    def test_block_outputs_and_attention_rows(self, rng):
        heads = BranchHeads(64, rng, 4, heads=4)
        heads(random_stack(rng))
        for t in TASK_NAMES:
            outs = heads.last_block_outputs[t]
            assert len(outs) == 4 and all(o.shape == (3, 31, 64) for o in outs)
            for w in heads.attention_weights(t):
                np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)

    def test_type_loss_reaches_backbone_layer_one(self, rng):
        bb = Backbone(BackboneConfig(), rng).eval()
        heads = BranchHeads(64, rng, 4)
        out = heads(bb.encode(rng.normal(size=(2, 4000))))
        cross_entropy(out["type"], [1, 5]).backward()
        grads = [p.grad for p in bb.layers[0].parameters() if p.grad is not None]
        assert grads and sum(np.linalg.norm(g) for g in grads) > 0

    def test_task_stacks_isolated(self, rng):
        heads = BranchHeads(64, rng, 4)
        stack = random_stack(rng)
        before = heads(stack)["type"].data.copy()
        for block in heads.blocks["high"]:
            for p in block.parameters():
                p.data = np.zeros_like(p.data)
        np.testing.assert_array_equal(heads(stack)["type"].data, before)

    def test_too_many_blocks(self, rng):
        with pytest.raises(ValueError):
            BranchHeads(64, rng, 2, n_blocks=3)

    def test_stack_length_checked(self, rng):
        with pytest.raises(ValueError):
            BranchHeads(64, rng, 4)(random_stack(rng, layers=2))
