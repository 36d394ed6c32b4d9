import numpy as np
import pytest

from conftest import CONFIGS
from tiednet.config import load_config
from tiednet.data import gen_synthetic
from tiednet.errors import ShapeError, TrainingDivergedError
from tiednet.optim import TrainState
from tiednet.train import accuracy, evaluate, train
from tiednet.zoo import build_model


def tiny(name, seed=0):
    cfg = load_config(CONFIGS / f'{name}.json')
    model = build_model(cfg, seed=seed)
    data = gen_synthetic(cfg.num_classes, 16, cfg.image_size, seed=seed,
                         channels=cfg.in_channels)
    return model, data


def parameters(model):
    return {name: param.data.copy() for name, param in model.named_parameters()}


class TestTrain:
    def test_metrics_per_step(self):
        model, data = tiny('vit-pe-tiny')
        state, metrics = train(model, data, steps=3, batch=8,
                               state=TrainState(lr=1e-3), progress=False)
        assert [entry.step for entry in metrics] == [1, 2, 3]
        assert state.step == 3
        assert all(np.isfinite(entry.loss) for entry in metrics)
        assert metrics[0].to_line().startswith('step 1 loss ')

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model, data = tiny('vit-pe-tiny')
            _, metrics = train(model, data, steps=3, batch=8,
                               state=TrainState(lr=1e-3, seed=4), progress=False)
            runs.append(([entry.loss for entry in metrics], parameters(model)))
        assert runs[0][0] == runs[1][0]
        for name, values in runs[0][1].items():
            np.testing.assert_array_equal(values, runs[1][1][name])

    def test_zero_learning_rate_keeps_parameters(self):
        model, data = tiny('resnet-pe-tiny')
        before = parameters(model)
        train(model, data, steps=2, batch=8, state=TrainState(lr=0.0), progress=False)
        for name, values in parameters(model).items():
            np.testing.assert_array_equal(values, before[name])

    def test_tying_preserved_after_steps(self):
        model, data = tiny('vit-pe-tiny')
        train(model, data, steps=2, batch=8, state=TrainState(lr=1e-2), progress=False)
        ffn = model.encoder[1].ffn
        np.testing.assert_array_equal(ffn.second_weight().data, ffn.W.data.T)

    def test_resume_continues_the_batch_stream(self):
        model, data = tiny('vit-pe-tiny')
        whole = model.clone()
        _, straight = train(whole, data, steps=4, batch=8,
                            state=TrainState(optimizer='sgd', lr=1e-2), progress=False)
        state, first = train(model, data, steps=2, batch=8,
                             state=TrainState(optimizer='sgd', lr=1e-2), progress=False)
        _, second = train(model, data, steps=2, batch=8, state=state, progress=False)
        assert [entry.loss for entry in first + second] == [entry.loss for entry in straight]

    def test_divergence_raises(self):
        model, data = tiny('vit-tiny')
        model.head.W.assign(np.full(model.head.W.dims, np.nan))
        with pytest.raises(TrainingDivergedError) as info:
            train(model, data, steps=3, batch=4, progress=False)
        assert info.value.step == 0

    def test_data_shape_checked(self):
        model, _ = tiny('vit-pe-tiny')
        with pytest.raises(ShapeError):
            train(model, gen_synthetic(4, 4, 16, seed=0), steps=1, batch=4, progress=False)


class TestEvaluate:
    def test_restores_mode(self):
        model, data = tiny('resnet-pe-tiny')
        loss, acc = evaluate(model, data)
        assert model.training
        assert np.isfinite(loss)
        assert 0.0 <= acc <= 1.0

    def test_accuracy_ties_go_to_lowest_index(self):
        assert accuracy(np.zeros((2, 3)), [0, 1]) == 0.5


@pytest.mark.slow
class TestLearning:
    def test_tiny_vit_pe_fits_training_data(self):
        cfg = load_config(CONFIGS / 'vit-pe-tiny.json')
        model = build_model(cfg, seed=0)
        data = gen_synthetic(cfg.num_classes, 64, cfg.image_size, seed=0)
        train(model, data, steps=500, batch=32, state=TrainState(lr=1e-3), progress=False)
        _, acc = evaluate(model, data)
        assert acc >= 0.95

    def test_tied_model_loss_within_half_again_of_baseline(self):
        finals = {}
        for name in ('vit-tiny', 'vit-pe-tiny'):
            cfg = load_config(CONFIGS / f'{name}.json')
            model = build_model(cfg, seed=0)
            data = gen_synthetic(cfg.num_classes, 64, cfg.image_size, seed=0)
            train(model, data, steps=500, batch=32, state=TrainState(lr=1e-3), progress=False)
            finals[name] = evaluate(model, data)[0]
        assert finals['vit-pe-tiny'] <= 1.5 * finals['vit-tiny']
