import numpy as np
import pytest

from pe_triage.labels import SliceLabel
from pe_triage.model import CbamdrnModel, ModelConfig
from pe_triage.phantom import PhantomSpec, generate_phantom_slice, write_dicom
from pe_triage.preprocess import preprocess_slice, stack_windows
from pe_triage.training import (
    EmptyDataset,
    LabelOutOfRange,
    SliceDataset,
    TrainConfig,
    confusion_from,
    dataset_from_manifest,
    evaluate,
    for_stage,
    stage_labels,
    train,
)
from pe_triage.triage import DatasetManifest, ManifestRow

PE, OTHER, WNL = SliceLabel.PE, SliceLabel.OTHER, SliceLabel.WNL
TINY = ModelConfig(stage_channels=(8, 8, 16, 16), cbam_reduction=4, spatial_kernel=3, input_size=32)


@pytest.fixture(scope="module")
def separable():
    """16 full-size slices, alternating WNL / other disease."""
    xs, ys = [], []
    for i in range(16):
        hu, _ = generate_phantom_slice(PhantomSpec(seed=500 + i, label=OTHER if i % 2 else WNL))
        xs.append(stack_windows(preprocess_slice(hu)))
        ys.append(i % 2)
    return SliceDataset(np.stack(xs), np.array(ys))


def _random_set(n, seed=0):
    rng = np.random.default_rng(seed)
    return SliceDataset(rng.standard_normal((n, 2, 1, 32, 32)).astype(np.float32), rng.integers(0, 2, n))


def test_one_epoch_history():
    model = CbamdrnModel(TINY, mode="DWL")
    result = train(model, _random_set(8), TrainConfig(epochs=1, batch_size=4))
    assert len(result.history) == 1 and result.best_epoch == 1
    assert not model.training


def test_same_seed_same_history():
    runs = []
    for _ in range(2):
        model = CbamdrnModel(TINY, mode="DWL", seed=2)
        r = train(model, _random_set(10), TrainConfig(epochs=2, batch_size=4, seed=5), _random_set(6, 1))
        runs.append(([(e.loss, e.train_accuracy, e.val_accuracy) for e in r.history], model.snapshot()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_stray_sample_folded_into_previous_batch():
    model = CbamdrnModel(TINY, mode="DWL")
    train(model, _random_set(9), TrainConfig(epochs=1, batch_size=4))  # 4 + 5, never a batch of one


def test_best_epoch_restored():
    model = CbamdrnModel(TINY, mode="DWL", seed=1)
    seen = {}

    def record(stats):
        seen[stats.epoch] = (stats.val_accuracy, model.snapshot())

    r = train(model, _random_set(12), TrainConfig(epochs=4, batch_size=4, lr=1e-2), _random_set(8, 3), record)
    best = max(v for v, _ in seen.values())
    assert seen[r.best_epoch][0] == best
    assert r.best_epoch == max(e for e, (v, _) in seen.items() if v == best)
    for k, arr in seen[r.best_epoch][1].items():
        np.testing.assert_array_equal(model.params[k].data, arr)


def test_errors():
    model = CbamdrnModel(TINY, mode="DWL")
    with pytest.raises(EmptyDataset):
        train(model, _random_set(0))
    bad = _random_set(4)
    bad.labels[0] = 2
    with pytest.raises(LabelOutOfRange):
        train(model, bad)
    with pytest.raises(ValueError):
        train(CbamdrnModel(TINY, mode="TWL"), _random_set(4))


def test_stage_relabeling():
    truth = [PE, WNL, OTHER, WNL, PE]
    keep, y = stage_labels(truth, 1)
    assert keep.tolist() == [0, 1, 2, 3, 4] and y.tolist() == [1, 0, 1, 0, 1]
    keep, y = stage_labels(truth, 2)
    assert keep.tolist() == [0, 2, 4] and y.tolist() == [1, 0, 1]
    with pytest.raises(ValueError):
        stage_labels(truth, 3)


def test_dataset_from_manifest(tmp_path):
    rows = []
    for i, lab in enumerate([PE, WNL, OTHER]):
        hu, _ = generate_phantom_slice(PhantomSpec(seed=i, label=lab, size=(256, 256)))
        rows.append(ManifestRow(str(write_dicom(hu, "A", "1.2", i + 1, tmp_path / f"{i}.dcm")), "A", lab))
    ds = dataset_from_manifest(DatasetManifest(rows), ("vascular", "lung"), jobs=2)
    assert ds.inputs.shape == (3, 2, 1, 224, 224)
    assert ds.truth == [PE, WNL, OTHER]
    s2 = for_stage(ds, 2)
    assert s2.labels.tolist() == [1, 0] and s2.truth == [PE, OTHER]
    with pytest.raises(EmptyDataset):
        dataset_from_manifest(DatasetManifest([]), ("vascular",))


def test_confusion():
    c = confusion_from(np.array([1, 1, 0, 0, 1]), np.array([1, 0, 0, 1, 1]))
    assert (c.tp, c.tn, c.fp, c.fn, c.total) == (2, 1, 1, 1, 5)
    perfect = confusion_from(np.array([0, 1, 1]), np.array([0, 1, 1]))
    assert perfect.fp == perfect.fn == 0


def test_constant_positive_model():
    model = CbamdrnModel(TINY, mode="DWL")
    model.params["fusion.weight"].data[:] = 0.0
    model.params["fusion.bias"].data[:] = 0.0  # exact tie -> positive
    c = evaluate(model, _random_set(10))
    assert c.tn == 0 and c.fn == 0 and c.total == 10


def test_loss_decreases_on_separable_phantoms(separable):
    model = CbamdrnModel(mode="DWL", seed=0)
    r = train(model, separable, TrainConfig(epochs=5, batch_size=8, lr=1e-3))
    losses = [e.loss for e in r.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
