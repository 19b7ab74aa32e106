import numpy as np
import pytest
import torch

from mtrcnet.data import ClipBatch
from mtrcnet.errors import ConfigurationError, DimensionError, NumericError, WeightFileError
from mtrcnet.model import (
    EPS,
    PARTITIONS,
    ArchConfig,
    RecurrentState,
    encode_frames,
    forward,
    init_parameters,
    map_phase_features,
    phase_head_forward,
    tool_head_forward,
)
from mtrcnet.weights import load_model, load_weights, read_container, save_weights


def frames(shape, rng):
    return torch.rand(shape, generator=rng)


def params_equal(a, b):
    return all(torch.equal(p, q) for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()))


def test_init_deterministic_and_seed_sensitive(tiny_arch):
    a = init_parameters(tiny_arch, 0)
    b = init_parameters(tiny_arch, 0)
    c = init_parameters(tiny_arch, 1)
    assert params_equal(a, b)
    assert not params_equal(a, c)


def test_init_rejects_bad_dims():
    with pytest.raises(ConfigurationError):
        ArchConfig(feature_dim=0)
    with pytest.raises(ConfigurationError):
        ArchConfig(mapping_source="nonsense")


def test_partitions_disjoint_and_exhaustive(tiny_model):
    parts = tiny_model.partitions()
    assert tuple(parts) == PARTITIONS
    ids = [id(p) for ps in parts.values() for p in ps.values()]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in tiny_model.parameters()}


def test_mapping_cell_shape(tiny_arch, tiny_model):
    w = tiny_model.mapping_cell.to_tools.weight
    assert tuple(w.shape) == (tiny_arch.num_tools, tiny_arch.phase_feature_dim)


def test_encode_frames_per_frame(tiny_model, rng):
    x = frames((2, 3, 3, 8, 8), rng)
    y = frames((1, 4, 3, 8, 8), rng)
    y[0, 2] = x[1, 0]
    with torch.no_grad():
        gx = encode_frames(x, tiny_model.backbone)
        gy = encode_frames(y, tiny_model.backbone)
    assert gx.shape == (2, 3, 6)
    torch.testing.assert_close(gx[1, 0], gy[0, 2], rtol=0, atol=1e-6)


def test_encode_zero_frames_identical(tiny_model):
    with torch.no_grad():
        g = encode_frames(torch.zeros(3, 2, 3, 8, 8), tiny_model.backbone)
    assert torch.equal(g[0], g[1]) and torch.equal(g[1], g[2])


def test_encode_frames_shape_error(tiny_model):
    with pytest.raises(DimensionError):
        encode_frames(torch.zeros(2, 3, 8, 8), tiny_model.backbone)


def test_tool_head_zero_weights(tiny_model, rng):
    torch.nn.init.zeros_(tiny_model.tool_head.weight)
    torch.nn.init.zeros_(tiny_model.tool_head.bias)
    with torch.no_grad():
        p = tool_head_forward(torch.randn(2, 3, 6, generator=rng), tiny_model.tool_head)
    assert torch.all(p == 0.5)


def test_tool_head_frame_permutation(tiny_model, rng):
    g = torch.randn(1, 5, 6, generator=rng)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        a = tool_head_forward(g, tiny_model.tool_head)
        b = tool_head_forward(g[:, perm], tiny_model.tool_head)
    torch.testing.assert_close(a[:, perm], b)


def test_tool_head_clamped(tiny_model):
    g = torch.full((1, 2, 6), 1e4)
    g[0, 1] = -1e4
    with torch.no_grad():
        p = tool_head_forward(g, tiny_model.tool_head)
    assert p.min() >= EPS and p.max() <= 1 - EPS


def test_tool_head_rejects_nan(tiny_model):
    with pytest.raises(NumericError):
        tool_head_forward(torch.full((1, 1, 6), float("nan")), tiny_model.tool_head)


def test_phase_head_causal_and_normalised(tiny_model, rng):
    g = torch.randn(2, 6, 6, generator=rng)
    g2 = g.clone()
    g2[:, 4:] += 3.0
    with torch.no_grad():
        p, r, _ = phase_head_forward(g, None, tiny_model.phase_head)
        p2, r2, _ = phase_head_forward(g2, None, tiny_model.phase_head)
    assert torch.equal(p[:, :4], p2[:, :4]) and torch.equal(r[:, :4], r2[:, :4])
    assert not torch.equal(p[:, 4:], p2[:, 4:])
    torch.testing.assert_close(p.sum(-1), torch.ones(2, 6), atol=1e-5, rtol=0)


def test_phase_head_zero_dynamics(tiny_model, rng):
    for prm in tiny_model.phase_head.parameters():
        torch.nn.init.zeros_(prm)
    with torch.no_grad():
        p, r, state = phase_head_forward(torch.randn(2, 4, 6, generator=rng), None, tiny_model.phase_head)
    assert torch.all(r == 0) and torch.all(state.hidden == 0)
    torch.testing.assert_close(p, torch.full_like(p, 1 / 7))


def test_phase_head_state_mismatch(tiny_model):
    with pytest.raises(DimensionError):
        phase_head_forward(torch.zeros(2, 3, 6), RecurrentState.zeros(3, 5), tiny_model.phase_head)


def test_phase_head_state_carries(tiny_model, rng):
    g = torch.randn(1, 6, 6, generator=rng)
    with torch.no_grad():
        whole, _, _ = phase_head_forward(g, None, tiny_model.phase_head)
        first, _, s = phase_head_forward(g[:, :3], None, tiny_model.phase_head)
        second, _, _ = phase_head_forward(g[:, 3:], s, tiny_model.phase_head)
    torch.testing.assert_close(torch.cat([first, second], 1), whole, atol=1e-6, rtol=0)


def test_mapping_cell(tiny_model, rng):
    cell = tiny_model.mapping_cell.to_tools
    r = torch.randn(2, 3, 5, generator=rng)
    with torch.no_grad():
        out = map_phase_features(r, cell)
        assert out.shape == (2, 3, 7)
        torch.testing.assert_close(map_phase_features(0 * r, cell), map_phase_features(torch.zeros_like(r), cell))
        torch.nn.init.zeros_(cell.weight)
        torch.nn.init.zeros_(cell.bias)
        assert torch.all(map_phase_features(r, cell) == 0.5)
    with pytest.raises(DimensionError):
        map_phase_features(torch.zeros(1, 1, 4), cell)


def test_forward_batch_independence(tiny_model, rng):
    x = frames((1, 3, 3, 8, 8), rng)
    other = frames((1, 3, 3, 8, 8), rng)
    batch = torch.cat([x, other, x])
    with torch.no_grad():
        pred = forward(batch, tiny_model)
        swapped = forward(torch.cat([other, x, x]), tiny_model)
    torch.testing.assert_close(pred.tool_probs[0], pred.tool_probs[2], atol=1e-6, rtol=0)
    torch.testing.assert_close(pred.phase_probs[0], pred.phase_probs[2], atol=1e-6, rtol=0)
    torch.testing.assert_close(pred.tool_probs[1], swapped.tool_probs[0], atol=1e-6, rtol=0)


def test_forward_contract_on_clipbatch(tiny_model, rng):
    clip = ClipBatch(frames((2, 3, 3, 8, 8), rng).numpy(), np.zeros((2, 3, 7)), np.zeros((2, 3), int))
    with torch.no_grad():
        pred = forward(clip, tiny_model)
    for t in (pred.tool_probs, pred.phase_probs, pred.tool_priors):
        assert t.min() >= EPS and t.max() <= 1 - EPS
    assert pred.phase_features.shape == (2, 3, 5)
    torch.testing.assert_close(pred.phase_probs.sum(-1), torch.ones(2, 3), atol=1e-5, rtol=0)
    assert pred.phase_priors is None


def test_forward_rejects_wrong_frame_size(tiny_model):
    with pytest.raises(DimensionError):
        tiny_model(torch.zeros(1, 2, 3, 9, 9))


def test_forward_causal(tiny_model, rng):
    x = frames((1, 5, 3, 8, 8), rng)
    y = x.clone()
    y[0, 3:] = torch.rand(2, 3, 8, 8, generator=rng)
    with torch.no_grad():
        a = forward(x, tiny_model)
        b = forward(y, tiny_model)
    for f in ("phase_probs", "phase_features", "tool_priors", "tool_probs"):
        assert torch.equal(getattr(a, f)[:, :3], getattr(b, f)[:, :3])


def test_label_space_and_mutual_variants(rng):
    cfg = ArchConfig(frame_size=8, encoder_channels=(4,), feature_dim=6, phase_feature_dim=5,
                     mapping_source="phase_labels", mutual_mapping=True)
    m = init_parameters(cfg, 0)
    assert tuple(m.mapping_cell.to_tools.weight.shape) == (7, 7)
    with torch.no_grad():
        pred = forward(frames((1, 3, 3, 8, 8), rng), m)
    assert pred.phase_priors.shape == (1, 3, 7)
    torch.testing.assert_close(pred.phase_priors.sum(-1), torch.ones(1, 3), atol=1e-5, rtol=0)


def test_weights_roundtrip(tmp_path, tiny_model, tiny_arch):
    path = tmp_path / "w.bin"
    save_weights(path, tiny_model)
    other = init_parameters(tiny_arch, 7)
    load_weights(path, other)
    assert params_equal(tiny_model, other)
    arrays, meta = read_container(path)
    assert all(k.split("/")[0] in PARTITIONS for k in arrays)
    assert all(a.dtype == np.dtype("<f4") for a in arrays.values())
    rebuilt, _ = load_model(path)
    assert params_equal(rebuilt, tiny_model)


def test_backbone_from_weight_file(tmp_path, tiny_model, tiny_arch):
    path = tmp_path / "w.bin"
    save_weights(path, tiny_model)
    m = init_parameters(tiny_arch, 5, backbone_weights=path)
    for (_, p), (_, q) in zip(m.backbone.named_parameters(), tiny_model.backbone.named_parameters()):
        assert torch.equal(p, q)
    assert not torch.equal(m.tool_head.weight, tiny_model.tool_head.weight)


def test_weight_file_shape_mismatch(tmp_path, tiny_model):
    path = tmp_path / "w.bin"
    save_weights(path, tiny_model)
    wider = ArchConfig(frame_size=8, encoder_channels=(4,), feature_dim=8, phase_feature_dim=5)
    with pytest.raises(WeightFileError):
        init_parameters(wider, 0, backbone_weights=path)
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(WeightFileError):
        read_container(tmp_path / "junk.bin")
