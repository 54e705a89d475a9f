import numpy as np
import pytest

from dunet import tensor as T
from dunet.geometry import anchor_array
from dunet.loss import build_targets, multibox_loss
from dunet.model import (
    ConfigError,
    DUNet,
    DUNetConfig,
    build_dunet,
    count_parameters,
    dense_block,
    desk_config,
    forward_detect,
    paper_config,
)


def closed_form_count(cfg: DUNetConfig) -> int:
    k, b, lat = cfg.growth_rate, cfg.bottleneck_filters, cfg.lateral_channels
    a, ncls = cfg.anchors_per_cell, cfg.num_classes + 1
    total = 27 * cfg.stem_filters + cfg.stem_filters + 2 * cfg.stem_filters
    ch = cfg.stem_filters
    for n in cfg.block_layers:
        for i in range(n):
            cin = ch + i * k
            total += 2 * cin + cin * b + b + 2 * b + 9 * b * k + k
        ch += n * k
        total += 2 * ch + ch * lat + lat
    head = 2 * lat + 9 * lat * a * ncls + a * ncls + 9 * lat * 4 * a + 4 * a
    return total + 4 * head


def test_paper_config_audit():
    cfg = paper_config()
    model = build_dunet(cfg)
    assert cfg.grid_sizes == [80, 40, 20, 10]
    expected = [64 + 5 * 32]
    for n in (7, 7, 7):
        expected.append(expected[-1] + n * 32)
    assert [b.out_channels for b in model.blocks] == expected == [224, 448, 672, 896]
    assert len(anchor_array(cfg)) == 34000


@pytest.mark.slow
def test_paper_config_forward_grids():
    model = build_dunet(paper_config())
    x = np.random.default_rng(0).normal(size=(1, 3, 320, 320))
    outs = forward_detect(model, x)
    assert [c.shape[2:] for c, _ in outs] == [(g, g) for g in (80, 40, 20, 10)]
    assert all(c.shape[1] == 4 * 11 and b.shape[1] == 16 for c, b in outs)


def test_desk_forward_shapes_and_determinism():
    cfg = desk_config()
    model = build_dunet(cfg, seed=3)
    x = np.random.default_rng(1).normal(size=(1, 3, 64, 64))
    outs = forward_detect(model, x)
    assert [c.shape for c, _ in outs] == [(1, 16, g, g) for g in (16, 8, 4, 2)]
    assert [b.shape for _, b in outs] == [(1, 16, g, g) for g in (16, 8, 4, 2)]
    assert all(np.isfinite(c).all() and np.isfinite(b).all() for c, b in outs)
    again = forward_detect(model, x)
    for (c1, b1), (c2, b2) in zip(outs, again):
        assert np.array_equal(c1, c2) and np.array_equal(b1, b2)


def test_pyramid_contract():
    cfg = desk_config()
    model = build_dunet(cfg)
    model.forward(np.zeros((2, 3, 64, 64)))
    sizes = [p.shape for p in model.last_pyramid]
    assert sizes == [(2, cfg.lateral_channels, g, g) for g in (16, 8, 4, 2)]
    for blk, out in zip(model.blocks, model.last_block_outputs):
        assert out.shape[1] == blk.in_channels + len(blk.layers) * cfg.growth_rate


def test_zero_heads_give_zero_offsets():
    model = build_dunet(desk_config())
    for h in model.heads:
        h.box.weight.data[:] = 0
        h.box.bias.data[:] = 0
    outs = forward_detect(model, np.zeros((1, 3, 64, 64)))
    assert all(not b.any() for _, b in outs)


def test_wrong_input_size():
    model = build_dunet(desk_config())
    with pytest.raises(T.DimensionError):
        model.forward(np.zeros((1, 3, 32, 32)))


@pytest.mark.parametrize("cin,layers,out", [(64, 7, 288), (64, 5, 224), (10, 1, 42)])
def test_dense_block_channels(cin, layers, out):
    blk = dense_block(cin, layers, 32, 64)
    assert blk.out_channels == out
    x = T.Tensor(np.random.default_rng(0).normal(size=(1, cin, 4, 4)))
    assert blk(x, True).shape == (1, out, 4, 4)


def test_single_layer_block_is_concat_of_input_and_layer():
    blk = dense_block(3, 1, 2, 4)
    x = T.Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
    out = blk(x, True).data
    assert np.array_equal(out[:, :3], x.data)
    assert np.array_equal(out[:, 3:], blk.layers[0](x, True).data)


def test_config_validation_lists_every_problem():
    with pytest.raises(ConfigError) as err:
        DUNet(DUNetConfig(input_size=100, block_layers=[1, 0, 2], growth_rate=0))
    msg = str(err.value)
    for word in ("input_size", "4 entries", ">= 1, got [1, 0, 2]", "growth_rate"):
        assert word in msg


def test_config_json_round_trip():
    cfg = desk_config()
    assert DUNetConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        DUNetConfig.from_dict({"input_size": 64, "bogus": 1})


def test_parameter_counts():
    conv = T.Tensor(np.zeros((64, 3, 3, 3)))
    assert conv.data.size + 64 == 1792
    cfg = desk_config()
    assert count_parameters(build_dunet(cfg)) == closed_form_count(cfg)
    assert count_parameters(build_dunet(cfg, seed=1)) == count_parameters(build_dunet(cfg, seed=2))
    assert count_parameters(build_dunet(paper_config())) == closed_form_count(paper_config())


def test_top_down_influence():
    cfg = desk_config()
    model = build_dunet(cfg, seed=0)
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 64))
    base = forward_detect(model, x)
    w = model.blocks[3].layers[-1].conv2.weight
    saved = w.data.copy()
    w.data += 0.05
    moved = forward_detect(model, x)
    assert not np.allclose(base[0][0], moved[0][0])
    w.data = saved
    model.heads[0].cls.weight.data += 0.1
    other = forward_detect(model, x)
    assert np.array_equal(base[3][0], other[3][0])


def test_ablation_cuts_top_down_influence():
    model = build_dunet(desk_config(), seed=0, top_down=False)
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 64))
    base = forward_detect(model, x)
    model.laterals[3].weight.data += 0.5
    moved = forward_detect(model, x)
    assert np.array_equal(base[0][0], moved[0][0])


def test_every_parameter_receives_gradient():
    cfg = desk_config()
    model = build_dunet(cfg, seed=0)
    anchors = anchor_array(cfg)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3, 64, 64))
    labels, targets = [], []
    for i in range(4):
        # one box per head scale so every head sees positives
        boxes = [[0.05, 0.05, 0.15, 0.15], [0.5, 0.1, 0.8, 0.4], [0.1, 0.4, 0.65, 0.95], [0.0, 0.0, 0.75, 0.75]]
        lab, tgt = build_targets(anchors, np.array(boxes) + 0.01 * i, np.array([1, 2, 3, 1 + i % 3]))
        labels.append(lab)
        targets.append(tgt)
    outs = model.forward(x, train=True)
    cls = T.flatten_heads([c for c, _ in outs], cfg.num_classes + 1)
    box = T.flatten_heads([b for _, b in outs], 4)
    loss = multibox_loss(cls, box, np.stack(labels), np.stack(targets))
    model.backward(loss.total)
    dead = [p.name for p in model.parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_backward_before_forward():
    model = build_dunet(desk_config())
    with pytest.raises(T.GraphStateError):
        model.backward(T.Tensor(1.0, requires_grad=True))


def test_state_dict_round_trip(tmp_path):
    cfg = desk_config()
    a = build_dunet(cfg, seed=1)
    a.forward(np.random.default_rng(0).normal(size=(2, 3, 64, 64)))
    p = tmp_path / "m.bin"
    a.save(p)
    b = build_dunet(cfg, seed=2)
    b.load_state_dict(T.load_checkpoint(p))
    x = np.random.default_rng(5).normal(size=(1, 3, 64, 64))
    for (c1, o1), (c2, o2) in zip(forward_detect(a, x), forward_detect(b, x)):
        assert np.array_equal(c1, c2) and np.array_equal(o1, o2)
    with pytest.raises(T.DimensionError):
        build_dunet(desk_config(num_classes=5)).load_state_dict(T.load_checkpoint(p))
