import numpy as np
import pytest

from tiednet import ops
from tiednet.errors import BuildError, ShapeError, TyingError
from tiednet.gradcheck import grad_check
from tiednet.nn import BlockSequence, BottleneckBlock, FfnLayer, MhaLayer
from tiednet.tensor import Tape, Tensor, no_grad
from tiednet.tied import SharedStage, TiedBottleneckBlock, TiedFfnLayer, TiedMhaLayer
from tiednet.zoo import init_weights


def param_count(module):
    return sum(param.size for param in module.parameters())


def copy_shared_params(source, target, skip):
    """Copies every Parameter of `source` into the same path of `target`."""
    target_params = dict(target.named_parameters())
    for name, param in source.named_parameters():
        if name not in skip:
            target_params[name].assign(param.data)


def backward_sum(module, x, projection):
    module.zero_grad()
    with Tape() as tape:
        out = module(x)
        loss = ops.sum_all(ops.mul(out, projection))
    tape.backward(loss)
    return out.data


class TestTiedMhaLayer:
    def test_single_token_identity(self):
        layer = TiedMhaLayer(4, 1)
        layer.W_q.assign(np.eye(4))
        layer.W_kv.assign(np.eye(4))
        x = np.arange(4, dtype=np.float32).reshape(1, 1, 4)
        np.testing.assert_allclose(layer(x).data, x)

    def test_equals_untied_twin_exactly(self, rng):
        tied = TiedMhaLayer(8, 2)
        init_weights(tied, seed=0)
        untied = MhaLayer(8, 2)
        untied.W_q.assign(tied.W_q.data)
        untied.W_k.assign(tied.W_kv.data)
        untied.W_v.assign(tied.W_kv.data.T)
        untied.W_proj.assign(tied.W_q.data.T)
        x = rng.standard_normal((2, 5, 8)).astype(np.float32)
        np.testing.assert_array_equal(tied(x).data, untied(x).data)

    def test_gradient_is_sum_of_roles(self, rng):
        tied = TiedMhaLayer(4, 2).astype('f64')
        init_weights(tied, seed=1)
        untied = MhaLayer(4, 2).astype('f64')
        untied.W_q.assign(tied.W_q.data)
        untied.W_k.assign(tied.W_kv.data)
        untied.W_v.assign(tied.W_kv.data.T)
        untied.W_proj.assign(tied.W_q.data.T)
        x = Tensor(rng.standard_normal((2, 3, 4)))
        projection = rng.standard_normal((2, 3, 4))

        backward_sum(tied, x, projection)
        backward_sum(untied, x, projection)
        np.testing.assert_allclose(tied.W_q.grad, untied.W_q.grad + untied.W_proj.grad.T,
                                   atol=1e-12)
        np.testing.assert_allclose(tied.W_kv.grad, untied.W_k.grad + untied.W_v.grad.T,
                                   atol=1e-12)

    def test_half_the_matrices(self):
        assert param_count(TiedMhaLayer(2, 1, qkv_bias=False, proj_bias=False)) == 8
        assert param_count(MhaLayer(2, 1, qkv_bias=False, proj_bias=False)) == 16

    def test_projection_is_a_view(self):
        layer = TiedMhaLayer(4, 2)
        with no_grad():
            assert np.shares_memory(layer.proj_weight().data, layer.W_q.data)
            assert np.shares_memory(layer.value_weight().data, layer.W_kv.data)

    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_gradients(self, rng, seed):
        layer = TiedMhaLayer(8, 2)
        init_weights(layer, seed=seed)
        report = grad_check(layer, inputs=rng.standard_normal((2, 3, 8)), seed=seed)
        assert report.passed, report.lines()


class TestTiedFfnLayer:
    def test_scalar_example(self):
        ffn = TiedFfnLayer(1, 1, activation='relu', bias=False)
        ffn.W.assign([[2.0]])
        assert ffn(np.array([[3.0]], np.float32)).data[0, 0] == 12.0

    def test_equals_untied_twin_exactly(self, rng):
        tied = TiedFfnLayer(6, 10)
        init_weights(tied, seed=0)
        tied.b_1.assign(rng.standard_normal(10))
        untied = FfnLayer(6, 10)
        untied.W_1.assign(tied.W.data)
        untied.W_2.assign(tied.W.data.T)
        untied.b_1.assign(tied.b_1.data)
        x = rng.standard_normal((3, 6)).astype(np.float32)
        np.testing.assert_array_equal(tied(x).data, untied(x).data)

    def test_gradient_is_sum_of_roles(self, rng):
        tied = TiedFfnLayer(3, 5).astype('f64')
        init_weights(tied, seed=1)
        untied = FfnLayer(3, 5).astype('f64')
        untied.W_1.assign(tied.W.data)
        untied.W_2.assign(tied.W.data.T)
        x = Tensor(rng.standard_normal((4, 3)))
        projection = rng.standard_normal((4, 3))

        backward_sum(tied, x, projection)
        backward_sum(untied, x, projection)
        np.testing.assert_allclose(tied.W.grad, untied.W_1.grad + untied.W_2.grad.T, atol=1e-12)
        np.testing.assert_allclose(tied.b_1.grad, untied.b_1.grad, atol=1e-12)

    def test_single_parameter_matrix(self):
        ffn = TiedFfnLayer(3, 5)
        matrices = [name for name, param in ffn.named_parameters() if len(param.dims) == 2]
        assert matrices == ['W']

    def test_gradients(self, rng):
        ffn = TiedFfnLayer(3, 5)
        init_weights(ffn, seed=0)
        ffn.b_1.assign(rng.standard_normal(5) * 0.5)
        ffn.b_2.assign(rng.standard_normal(3) * 0.5)
        report = grad_check(ffn, inputs=rng.standard_normal((4, 3)))
        assert report.passed, report.lines()
        assert report.max_error < 1e-6

    def test_scaled_gradient_is_caught(self, rng):
        ffn = TiedFfnLayer(3, 5)
        init_weights(ffn, seed=0)
        report = grad_check(ffn, inputs=rng.standard_normal((4, 3)), analytic_scale=1.01)
        assert not report.passed


class TestTiedBottleneckBlock:
    def test_scalar_example(self):
        block = TiedBottleneckBlock(1, 1).eval()
        block.W.assign([[3.0]])
        block.inner.conv.weight.assign(np.ones((1, 1, 1, 1)) * np.pad([[1.0]], 1))
        x = np.full((1, 1, 3, 3), 2.0, np.float32)
        np.testing.assert_allclose(block(x).data, 20.0, rtol=1e-4)

    def test_equals_untied_twin_exactly(self, rng):
        tied = TiedBottleneckBlock(8, 2)
        init_weights(tied, seed=0)
        untied = BottleneckBlock(8, 2, 8)
        copy_shared_params(tied, untied, skip={'W'})
        untied.W_reduce.assign(tied.W.data)
        untied.W_expand.assign(tied.W.data.T)
        x = rng.standard_normal((2, 8, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(tied(x).data, untied(x).data)

    @pytest.mark.parametrize('kwargs', [{'c_out': 16}, {'stride': 2}])
    def test_untieable_shapes(self, kwargs):
        with pytest.raises(TyingError):
            TiedBottleneckBlock(8, 2, **kwargs)

    def test_shared_weight_dims_checked(self):
        other = TiedBottleneckBlock(8, 4)
        with pytest.raises(TyingError):
            TiedBottleneckBlock(8, 2, W=other.W)

    def test_no_downsample(self):
        assert TiedBottleneckBlock(8, 2).downsample is None

    def test_gradients(self, rng):
        block = TiedBottleneckBlock(4, 2)
        init_weights(block, seed=3)
        report = grad_check(block, inputs=rng.standard_normal((2, 4, 5, 5)))
        assert report.passed, report.lines()


class TestSharedStage:
    def test_one_block_equals_tied_block(self, rng):
        stage = SharedStage(8, 2, 1)
        init_weights(stage, seed=0)
        block = TiedBottleneckBlock(8, 2)
        block.W.assign(stage.W.data)
        copy_shared_params(stage.blocks[0], block, skip={'W'})
        x = rng.standard_normal((2, 8, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(stage(x).data, block(x).data)

    def test_every_block_reads_the_stage_weight(self, rng):
        stage = SharedStage(4, 2, 3)
        init_weights(stage, seed=0)
        x = Tensor(rng.standard_normal((1, 4, 2, 2)).astype(np.float32))
        before = [ops.pointwise_conv(x, block.reduce_weight()).data for block in stage.blocks]

        stage.W.data[0, 0] += 1.0
        for block, old in zip(stage.blocks, before):
            assert block.W is stage.W
            assert not np.array_equal(ops.pointwise_conv(x, block.reduce_weight()).data, old)

    def test_single_shared_name(self):
        stage = SharedStage(4, 2, 3)
        stage.name_parameters('stages.2.body.')
        names = [name for name, _ in stage.named_parameters()]
        assert names.count('stages.2.body.W') == 1
        assert not any(name.endswith('.W') and name != 'stages.2.body.W' for name in names)
        assert all(block.W.name == 'stages.2.body.W' for block in stage.blocks)

    def test_gradient_superposes_over_blocks(self, rng):
        stage = SharedStage(4, 2, 2).astype('f64')
        init_weights(stage, seed=4)
        twin = BlockSequence(TiedBottleneckBlock(4, 2) for _ in range(2)).astype('f64')
        for index, block in enumerate(twin.blocks):
            copy_shared_params(stage.blocks[index], block, skip={'W'})
            block.W.assign(stage.W.data)
        x = Tensor(rng.standard_normal((2, 4, 3, 3)))
        projection = rng.standard_normal((2, 4, 3, 3))

        out_stage = backward_sum(stage, x, projection)
        out_twin = backward_sum(twin, x, projection)
        np.testing.assert_array_equal(out_stage, out_twin)
        np.testing.assert_allclose(
            stage.W.grad, twin.blocks[0].W.grad + twin.blocks[1].W.grad, atol=1e-12
        )

    def test_gradients(self, rng):
        stage = SharedStage(4, 2, 2)
        init_weights(stage, seed=5)
        report = grad_check(stage, inputs=rng.standard_normal((2, 4, 3, 3)))
        assert report.passed, report.lines()

    def test_needs_a_block(self):
        with pytest.raises(BuildError):
            SharedStage(4, 2, 0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            SharedStage(4, 2, 2)(rng.standard_normal((1, 3, 2, 2)).astype(np.float32))

    def test_parameter_count(self):
        stage = SharedStage(4, 2, 3)
        private = BlockSequence(TiedBottleneckBlock(4, 2) for _ in range(3))
        assert param_count(private) - param_count(stage) == 2 * 4 * 2


def tied_and_untied(kind, seed):
    """A random f64 tied layer, its untied twin with equal weights, an input and the generator."""
    rng = np.random.default_rng(seed)
    if kind == 'mha':
        tied = TiedMhaLayer(8, 2).astype('f64')
        untied = MhaLayer(8, 2).astype('f64')
        roles = {'W_q': ('W_q', 'W_proj'), 'W_kv': ('W_k', 'W_v')}
        dims = (2, 3, 8)
    elif kind == 'ffn':
        tied = TiedFfnLayer(4, 8).astype('f64')
        untied = FfnLayer(4, 8).astype('f64')
        roles = {'W': ('W_1', 'W_2')}
        dims = (3, 4)
    else:
        tied = TiedBottleneckBlock(4, 2).astype('f64')
        untied = BottleneckBlock(4, 2, 4).astype('f64')
        roles = {'W': ('W_reduce', 'W_expand')}
        dims = (2, 4, 5, 5)

    for param in tied.parameters():
        param.assign(rng.standard_normal(param.dims) * 0.5)
    copy_shared_params(tied, untied, skip=set(roles))
    untied_params = dict(untied.named_parameters())
    for name, (first, second) in roles.items():
        weight = dict(tied.named_parameters())[name].data
        untied_params[first].assign(weight)
        untied_params[second].assign(weight.T)
    return tied, untied, roles, rng.standard_normal(dims), rng


@pytest.mark.slow
class TestUntiedEquivalenceSweep:
    @pytest.mark.parametrize('kind', ['mha', 'ffn', 'bottleneck'])
    @pytest.mark.parametrize('seed', range(100))
    def test_forward_and_gradients(self, kind, seed):
        tied, untied, roles, x, rng = tied_and_untied(kind, seed)
        projection = rng.standard_normal(x.shape)

        out_tied = backward_sum(tied, Tensor(x), projection)
        out_untied = backward_sum(untied, Tensor(x), projection)
        np.testing.assert_array_equal(out_tied, out_untied)

        tied_params = dict(tied.named_parameters())
        untied_params = dict(untied.named_parameters())
        for name, (first, second) in roles.items():
            expected = untied_params[first].grad + untied_params[second].grad.T
            np.testing.assert_allclose(tied_params[name].grad, expected,
                                       rtol=1e-12, atol=1e-12, err_msg=name)
