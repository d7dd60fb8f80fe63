import math

import numpy as np
import pytest
import torch

from noduleprobe import predict
from noduleprobe.data import ATTRIBUTES, CLASS_COUNTS, EXCLUDED, AnnotationMask, NoduleDataset
from noduleprobe.model import EncoderConfig, freeze, init_parameters
from noduleprobe.predict import (ProbeError, ProbeHeads, ProbeTrainConfig, loss_stage2, predict_attributes,
                                 predict_labels, predict_malignancy)


def test_class_counts_and_concat_length():
    assert CLASS_COUNTS == (5, 4, 6, 5, 5, 5, 5, 5)
    probe = ProbeHeads(384)
    # construction oracle: features followed by every attribute block
    assert probe.concat_dim == 384 + sum(CLASS_COUNTS) == 424
    assert probe.malignancy_head.in_features == 424
    z = predict_attributes(probe, torch.randn(2, 384))
    assert [t.shape[-1] for t in z] == list(CLASS_COUNTS)
    assert z[0].shape == (2, 5)


def test_zero_heads_give_uniform_softmax():
    probe = ProbeHeads(8)
    with torch.no_grad():
        for p in probe.parameters():
            p.zero_()
    for z, c in zip(predict_attributes(probe, torch.randn(3, 8)), CLASS_COUNTS):
        torch.testing.assert_close(torch.softmax(z, -1), torch.full((3, c), 1.0 / c))


def test_identity_head_selects_basis_logit():
    probe = ProbeHeads(5)
    with torch.no_grad():
        probe.attribute_heads[0].weight.copy_(torch.eye(5))
        probe.attribute_heads[0].bias.zero_()
    z = predict_attributes(probe, torch.eye(5)[[3]])
    assert int(z[0].argmax()) == 3


def test_dim_mismatch_errors():
    probe = ProbeHeads(8)
    with pytest.raises(ProbeError):
        predict_attributes(probe, torch.randn(2, 9))
    z = predict_attributes(probe, torch.randn(2, 8))
    with pytest.raises(ProbeError):
        predict_malignancy(probe, torch.randn(2, 8), z[:-1])


def test_calcification_block_drives_benign_logit():
    probe = ProbeHeads(4)
    k = ATTRIBUTES.index("calcification")
    offset = 4 + sum(CLASS_COUNTS[:k])
    with torch.no_grad():
        probe.malignancy_head.weight.zero_()
        probe.malignancy_head.bias.zero_()
        probe.malignancy_head.weight[1, offset + 5] = -1.0  # malignant logit falls with the "absent" class
        probe.malignancy_head.weight[0, offset + 5] = 1.0
    f = torch.zeros(1, 4)
    outs = []
    for v in (0.0, 1.0, 2.0):
        z = [torch.zeros(1, c) for c in CLASS_COUNTS]
        z[k][0, 5] = v
        outs.append(predict_malignancy(probe, f, z)[0])
    assert outs[0][0] < outs[1][0] < outs[2][0]


def test_concat_order_is_part_of_the_contract():
    torch.manual_seed(0)
    probe = ProbeHeads(6)
    f = torch.randn(2, 6)
    z = [torch.randn(2, c) for c in CLASS_COUNTS]
    base = predict_malignancy(probe, f, z)
    swapped = [z[i] for i in (0, 1, 2, 3, 5, 4, 6, 7)]  # two 5-class blocks exchanged
    assert not torch.allclose(base, predict_malignancy(probe, f, swapped))


def test_linear_homogeneity():
    torch.manual_seed(1)
    probe = ProbeHeads(6)
    f = torch.randn(3, 6)
    z1 = predict_attributes(probe, f)
    scaled = ProbeHeads(6)
    scaled.load_state_dict(probe.state_dict())
    with torch.no_grad():
        for h in scaled.attribute_heads:
            h.weight.div_(2.0)
    z2 = predict_attributes(scaled, 2 * f)
    for a, b in zip(z1, z2):
        torch.testing.assert_close(a, b)


def labels(n=2, value=1):
    return np.full((n, 8), value)


def test_loss_perfect_predictions_is_zero():
    ords = np.array([[1, 2, 3, 4, 5, 1, 2, 3], [5, 4, 6, 1, 1, 5, 5, 5]])
    targets = predict.attribute_targets(ords)
    z = [100.0 * torch.nn.functional.one_hot(targets[:, k], c).double() for k, c in enumerate(CLASS_COUNTS)]
    mal = torch.tensor([[100.0, 0.0], [0.0, 100.0]], dtype=torch.float64)
    total, terms = loss_stage2(z, mal, ords, [0, 1])
    assert float(total) < 1e-20
    assert set(terms) == set(ATTRIBUTES) | {"malignancy"}


def test_loss_uniform_predictions():
    z = [torch.zeros(2, c) for c in CLASS_COUNTS]
    total, terms = loss_stage2(z, torch.zeros(2, 2), labels(), [0, 1])
    assert float(terms["subtlety"]) == pytest.approx(math.log(5))
    assert float(terms["calcification"]) == pytest.approx(math.log(6))
    assert float(total) == pytest.approx(sum(math.log(c) for c in CLASS_COUNTS) + math.log(2))
    # no hidden weighting
    assert float(total) == pytest.approx(sum(float(v) for v in terms.values()))


def test_loss_term_matches_scalar_oracle():
    logits = [[0.2, -1.0, 0.5, 0.0, 1.5], [1.0, 2.0, -0.5, 0.3, 0.0]]
    y = [2, 4]  # ordinals 3 and 5

    def ce(row, t):
        return -(row[t] - math.log(sum(math.exp(v) for v in row)))

    oracle = (ce(logits[0], 2) + ce(logits[1], 4)) / 2
    z = [torch.tensor(logits, dtype=torch.float64)] + [torch.zeros(2, c) for c in CLASS_COUNTS[1:]]
    ords = labels()
    ords[:, 0] = [3, 5]
    _, terms = loss_stage2(z, torch.zeros(2, 2), ords, [0, 1])
    assert abs(float(terms["subtlety"]) - oracle) < 1e-12


def test_loss_label_range_errors():
    z = [torch.zeros(1, c) for c in CLASS_COUNTS]
    bad = labels(1)
    bad[0, 1] = 5  # internalStructure is 1..4
    with pytest.raises(ProbeError):
        loss_stage2(z, torch.zeros(1, 2), bad, [0])
    with pytest.raises(ProbeError):
        loss_stage2(z, torch.zeros(1, 2), labels(1), [2])


def test_excluded_malignancy_contributes_attributes_only():
    z = [torch.zeros(2, c) for c in CLASS_COUNTS]
    mal = torch.tensor([[0.0, 3.0], [5.0, 0.0]])
    _, t_both = loss_stage2(z, mal, labels(), [1, EXCLUDED])
    _, t_one = loss_stage2([x[:1] for x in z], mal[:1], labels(1), [1])
    assert float(t_both["malignancy"]) == pytest.approx(float(t_one["malignancy"]))


def toy_dataset(n=20, d=32):
    rng = np.random.default_rng(0)
    attrs = np.stack([rng.integers(1, c + 1, size=n) for c in CLASS_COUNTS], axis=1)
    return NoduleDataset(np.array([f"n{i:02d}" for i in range(n)]), np.array(["r"] * n),
                         rng.random((n, d, d)).astype(np.float32), attrs, (np.arange(n) % 2).astype(np.int64))


TINY = EncoderConfig(depth=4, n_heads=2, embed_dim=16, patch_size=8)


def encoder_hash(enc):
    return {k: v.clone() for k, v in enc.state_dict().items()}


def test_train_stage2_keeps_encoder_frozen_and_logs(tmp_path):
    enc = freeze(init_parameters(TINY, None, seed=0))
    before = encoder_hash(enc)
    cfg = ProbeTrainConfig(epochs=3, batch_size=8, lr=0.01)
    probe, log = predict.train_stage2(enc, toy_dataset(), None, cfg, seed=0, log_path=tmp_path / "m.jsonl")
    assert len(log) == 3 and len((tmp_path / "m.jsonl").read_text().splitlines()) == 3
    assert set(log[0]["terms"]) == set(ATTRIBUTES) | {"malignancy"}
    assert probe.feature_dim == 64  # concat_last_4
    for k, v in enc.state_dict().items():
        assert torch.equal(v, before[k])


def test_train_stage2_requires_frozen_encoder():
    with pytest.raises(ProbeError):
        predict.train_stage2(init_parameters(TINY, None), toy_dataset(), None, ProbeTrainConfig(epochs=1))


def test_train_stage2_needs_malignancy_labels():
    ds = toy_dataset()
    ds.malignancy[:] = EXCLUDED
    enc = freeze(init_parameters(TINY, None))
    with pytest.raises(ProbeError):
        predict.train_stage2(enc, ds, None, ProbeTrainConfig(epochs=1))


def test_single_sample_loss_decreases():
    ds = toy_dataset()
    mask = AnnotationMask(0.05, frozenset({"n03"}), 0)
    enc = freeze(init_parameters(TINY, None))
    cfg = ProbeTrainConfig(epochs=30, lr=0.05, augment=False)
    _, log = predict.train_stage2(enc, ds, mask, cfg)
    assert log[-1]["loss"] < log[0]["loss"]


def test_lr_resolution():
    cfg = ProbeTrainConfig()
    assert cfg.resolve_lr(1.0) == 0.0005
    assert cfg.resolve_lr(0.1) == 0.00025
    assert ProbeTrainConfig(lr=0.3).resolve_lr(0.1) == 0.3
    with pytest.raises(ProbeError):
        ProbeTrainConfig(epochs=0)


def test_probe_roundtrip_is_bit_exact(tmp_path):
    torch.manual_seed(3)
    probe = ProbeHeads(16, feature_source="final_token")
    f = torch.randn(5, 16)
    a_attr, a_mal = predict_labels(probe, f)
    with torch.no_grad():
        za, zm = probe(f)
    predict.save_probe(tmp_path / "p.pth", probe)
    back = predict.load_probe(tmp_path / "p.pth")
    with torch.no_grad():
        zb, zmb = back(f)
    assert torch.equal(zm, zmb) and all(torch.equal(x, y) for x, y in zip(za, zb))
    b_attr, b_mal = predict_labels(back, f)
    np.testing.assert_array_equal(a_attr, b_attr)
    np.testing.assert_array_equal(a_mal, b_mal)
    assert back.feature_source == "final_token"


def test_predict_labels_are_ordinals():
    probe = ProbeHeads(4)
    attrs, mal = predict_labels(probe, torch.randn(6, 4))
    assert attrs.shape == (6, 8) and mal.shape == (6,)
    assert (attrs >= 1).all()
    assert set(mal.tolist()) <= {0, 1}


def test_stop_gradient_blocks_attribute_updates():
    torch.manual_seed(0)
    probe = ProbeHeads(4, stop_gradient=True)
    f = torch.randn(3, 4)
    z, m = probe(f)
    m.sum().backward()
    assert all(h.weight.grad is None for h in probe.attribute_heads)
    probe2 = ProbeHeads(4)
    z, m = probe2(f)
    m.sum().backward()
    assert probe2.attribute_heads[0].weight.grad is not None


def test_end_to_end_baseline_runs():
    enc, probe = predict.train_end_to_end(toy_dataset(), None, epochs=2, batch_size=8)
    attrs, mal = predict_labels(probe, torch.from_numpy(np.zeros((1, 64), np.float32)))
    assert attrs.shape == (1, 8)
    from noduleprobe.model import is_frozen
    assert is_frozen(enc)


def test_standardized_probe_stores_training_statistics(tmp_path):
    enc = freeze(init_parameters(TINY, None, seed=0))
    ds = toy_dataset()
    cfg = ProbeTrainConfig(epochs=2, batch_size=8, lr=0.01, augment=False, standardize=True)
    probe, _ = predict.train_stage2(enc, ds, None, cfg)
    from noduleprobe.model import extract_feature
    f = extract_feature(enc, ds.patches, "concat_last_4").values
    np.testing.assert_allclose(probe.feature_mean.numpy(), f.mean(0), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(probe.feature_scale.numpy(), f.std(0), rtol=1e-4, atol=1e-6)
    predict.save_probe(tmp_path / "p.pth", probe)
    back = predict.load_probe(tmp_path / "p.pth")
    assert torch.equal(back.feature_mean, probe.feature_mean)
    np.testing.assert_array_equal(predict_labels(back, f)[0], predict_labels(probe, f)[0])


def test_standardization_is_an_affine_map_folded_into_the_heads():
    torch.manual_seed(0)
    probe = ProbeHeads(4)
    f = torch.randn(5, 4)
    mean, scale = torch.tensor([1.0, -2.0, 0.5, 0.0]), torch.tensor([2.0, 0.5, 1.0, 4.0])
    with torch.no_grad():
        probe.feature_mean.copy_(mean)
        probe.feature_scale.copy_(scale)
        z = predict_attributes(probe, f)[0]
        head = probe.attribute_heads[0]
        folded = f @ (head.weight / scale).T + head.bias - (head.weight @ (mean / scale))
    torch.testing.assert_close(z, folded)
