import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from clbench.autodiff import backward, softmax_xent
from clbench.errors import ConfigError, DimensionError, FormatError, ProtocolViolation
from clbench.model import (LogitMask, ModelConfig, apply_mask, build_model, expected_parameter_count,
                           extract_features, forward_logits, grow_head, load_checkpoint, predict_logits,
                           read_tensors, save_checkpoint, write_tensors)

TINY = ModelConfig(input_shape=(1, 8, 8), conv_filters=(4, 8), feature_dim=16, head_hidden=12, seed=3)


def grown(cfg=TINY, blocks=((0, 1), (2, 3))):
    m = build_model(cfg)
    for t, labels in enumerate(blocks):
        grow_head(m, labels, t)
    return m


def test_same_seed_identical_parameters():
    a, b = build_model(TINY), build_model(TINY)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_different_seed_differs():
    a = build_model(TINY)
    b = build_model(ModelConfig((1, 8, 8), (4, 8), 16, 12, seed=4))
    assert not np.array_equal(a.params["conv0.w"].data, b.params["conv0.w"].data)


def test_default_config_feature_shape(rng):
    m = build_model(ModelConfig())
    f = extract_features(m, rng.normal(size=(2, 3, 28, 28)))
    assert f.shape == (2, 128)


def test_parameter_count_hand_count():
    # conv 16*3*9+16, conv 32*16*9+32, dense 1568*128+128, dense 128*512+512
    cfg = ModelConfig()
    assert expected_parameter_count(cfg) == 448 + 4640 + 200832 + 66048
    m = build_model(cfg)
    assert m.parameter_count() == 271968
    for t in range(4):
        grow_head(m, [2 * t, 2 * t + 1], t)
    assert m.parameter_count() == 271968 + 512 * 8 + 8 == expected_parameter_count(cfg, 8)


def test_indivisible_input_rejected():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(input_shape=(1, 6, 6), conv_filters=(4, 8)))


def test_grow_head_class_to_task():
    m = grown()
    assert m.class_count == 4
    assert m.class_to_task == [0, 0, 1, 1]


def test_bloodmnist_partition_grows_to_eight():
    m = grown(blocks=((0, 1), (2, 3), (4, 5), (6, 7)))
    assert m.class_count == 8


def test_grow_head_does_not_change_old_logits(rng):
    m = grown(blocks=((0, 1),))
    x = rng.normal(size=(5, 1, 8, 8))
    before = predict_logits(m, x)
    feats = extract_features(m, x)
    grow_head(m, [2, 3, 4], 1)
    after = predict_logits(m, x)
    assert after.shape == (5, 5)
    np.testing.assert_array_equal(after[:, :2], before)
    np.testing.assert_array_equal(extract_features(m, x), feats)


def test_grow_head_overlap_rejected():
    m = grown(blocks=((0, 1),))
    with pytest.raises(ProtocolViolation):
        grow_head(m, [1, 2], 1)


def test_zero_batch_gives_finite_logits():
    z = predict_logits(grown(), np.zeros((3, 1, 8, 8)))
    assert np.all(np.isfinite(z))
    np.testing.assert_array_equal(z[0], z[1])


def test_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        forward_logits(grown(), np.zeros((1, 3, 8, 8)))


def test_normalized_features_unit_norm(rng):
    f = extract_features(grown(), rng.normal(size=(6, 1, 8, 8)), normalize=True)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-9)


def test_extract_features_records_nothing(rng):
    from clbench.autodiff import Tape, using_tape
    tape = Tape()
    with using_tape(tape):
        extract_features(grown(), rng.normal(size=(2, 1, 8, 8)))
    assert len(tape.records) == 0


def test_model_loss_backprop_covers_all_params(rng):
    m = grown()
    x = rng.normal(size=(4, 1, 8, 8))
    g = backward(softmax_xent(m(x), [0, 1, 2, 3]), params=m.params.values())
    assert set(g) == set(m.params)
    for k, p in m.params.items():
        assert g[k].shape == p.shape


# --- masking -------------------------------------------------------------------

def test_apply_mask_tie_lowest():
    assert apply_mask(np.array([[9.0, 1.0, 5.0, 5.0]]), LogitMask.of([2, 3]))[0] == 2


def test_apply_mask_full_is_argmax(rng):
    z = rng.normal(size=(10, 6))
    np.testing.assert_array_equal(apply_mask(z, range(6)), z.argmax(axis=1))


def test_empty_mask_rejected():
    with pytest.raises(ProtocolViolation):
        LogitMask.of([])
    with pytest.raises(ProtocolViolation):
        apply_mask(np.zeros((1, 3)), [])


@given(arrays(np.float64, (8, 5), elements=st.floats(-50, 50)),
       st.sets(st.integers(0, 4), min_size=1))
def test_mask_restriction_property(z, mask):
    full = z.argmax(axis=1)
    masked = apply_mask(z, mask)
    inside = np.isin(full, list(mask))
    np.testing.assert_array_equal(masked[inside], full[inside])
    assert np.all(np.isin(masked, list(mask)))


@given(arrays(np.float64, (12, 6), elements=st.floats(-50, 50)),
       st.sets(st.integers(0, 5), min_size=1), st.data())
def test_masked_accuracy_dominance(z, mask, data):
    labels = np.array(data.draw(st.lists(st.sampled_from(sorted(mask)), min_size=12, max_size=12)))
    acc_full = np.mean(apply_mask(z, range(6)) == labels)
    acc_masked = np.mean(apply_mask(z, mask) == labels)
    assert acc_masked >= acc_full


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    m = grown()
    path = tmp_path / "m.clmd"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.cfg == m.cfg and back.class_to_task == m.class_to_task
    x = rng.normal(size=(3, 1, 8, 8))
    np.testing.assert_array_equal(predict_logits(back, x), predict_logits(m, x))
    save_checkpoint(back, tmp_path / "again.clmd")
    assert (tmp_path / "again.clmd").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "t.clmd"
    write_tensors(path, {"w": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"CLMD"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6:14] == (1).to_bytes(8, "little")
    assert raw[14:16] == (1).to_bytes(2, "little") and raw[16:17] == b"w"
    assert raw[17] == 2
    assert raw[18:26] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[26:], "<f8").tolist() == [1.0, 2.0]


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.clmd"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(FormatError):
        read_tensors(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "t.clmd"
    write_tensors(path, {"w": np.ones(4)})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_tensors(path)
