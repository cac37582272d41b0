import struct

import numpy as np
import pytest

from pemmsc.autodiff import DimensionError, Graph, Tensor, backward
from pemmsc.channel import power_normalize
from pemmsc.network import (VARIANTS, CheckpointFormatError, ConfigurationError, ModelSpec,
                            checkpoint_bytes, count_flops, decode, encode, fc_flops,
                            final_classify, forward_full, fuse, init_params,
                            parameter_count, parse_checkpoint, pe_classify, receiver,
                            transmitter)

SMALL = dict(d_hsi=12, d_lidar=5, m=4, K=8, encoder_widths=[10, 9, 8],
             decoder_widths=[7, 9])


def small_spec(variant="PE-MMSC", **kw):
    return ModelSpec(variant=variant, **{**SMALL, **kw})


def batch(spec, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return {"hsi": Tensor(rng.uniform(size=(n, spec.d_hsi))),
            "lidar": Tensor(rng.uniform(size=(n, spec.d_lidar)))}


def identity(g, s):
    return s


def zero_params(params, subs=None):
    for name, t in params.tensors.items():
        if subs is not None and name.split(".")[0] not in subs:
            continue
        if name.endswith(".gamma"):
            t.data[...] = 1.0
        else:
            t.data[...] = 0.0


# -- shapes -------------------------------------------------------------------

def test_encode_default_dims():
    spec = ModelSpec()
    params = init_params(spec, 0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 144)))
    assert encode(Graph(), params, spec, x, "hsi").shape == (2, 64)


def test_encode_wrong_width():
    spec = ModelSpec()
    params = init_params(spec, 0)
    with pytest.raises(DimensionError):
        encode(Graph(), params, spec, Tensor(np.zeros((2, 143))), "hsi")


def test_encode_frozen_params_give_zeros():
    spec = ModelSpec()
    params = init_params(spec, 0)
    zero_params(params, {"enc_hsi"})
    x = Tensor(np.random.default_rng(1).uniform(size=(3, 144)))
    out = encode(Graph(), params, spec, x, "hsi")
    np.testing.assert_array_equal(out.data, 0.0)


def test_encode_deterministic():
    spec = ModelSpec()
    x = Tensor(np.random.default_rng(2).uniform(size=(4, 144)))
    a = encode(Graph(), init_params(spec, 5), spec, x, "hsi", train=False).data
    b = encode(Graph(), init_params(spec, 5), spec, x, "hsi", train=False).data
    assert np.array_equal(a, b)


def test_pe_classify_zero_weights_uniform():
    spec = ModelSpec()
    params = init_params(spec, 0)
    zero_params(params, {"pe"})
    s = Tensor(np.random.default_rng(0).normal(size=(2, 64)))
    out = pe_classify(Graph(), params, s)
    assert out.shape == (2, 15)
    np.testing.assert_allclose(out.data, 1 / 15, rtol=0, atol=1e-15)


@pytest.mark.parametrize("clf", [pe_classify, final_classify])
def test_classifier_rows_sum_to_one(clf):
    spec = ModelSpec()
    params = init_params(spec, 3)
    s = Tensor(np.random.default_rng(3).normal(size=(5, 64)) * 4)
    out = clf(Graph(), params, s)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)


def test_final_classify_zero_params_uniform():
    spec = ModelSpec()
    params = init_params(spec, 0)
    zero_params(params, {"cls"})
    out = final_classify(Graph(), params, Tensor(np.ones((3, 64))))
    np.testing.assert_allclose(out.data, 1 / 15, atol=1e-15)


def test_classifier_width_mismatch():
    spec = ModelSpec()
    params = init_params(spec, 0)
    with pytest.raises(DimensionError):
        pe_classify(Graph(), params, Tensor(np.ones((2, 63))))


@pytest.mark.parametrize("variant,width", [("PE-MMSC", 143), ("EndNet", 128), ("HSI+PE", 79),
                                           ("LiDAR+PE", 79), ("DeepEndNet", 128)])
def test_fusion_input_width(variant, width):
    spec = ModelSpec(variant=variant)
    assert spec.fusion_input_dim() == width
    assert spec.layers()["fusion"][0][1] == width


def test_fuse_output_shape():
    spec = ModelSpec()
    params = init_params(spec, 0)
    rng = np.random.default_rng(0)
    s = fuse(Graph(), params, spec, Tensor(rng.normal(size=(2, 64))),
             Tensor(rng.normal(size=(2, 64))), Tensor(np.full((2, 15), 1 / 15)))
    assert s.shape == (2, 64)


def test_fuse_presence_mismatch():
    spec = ModelSpec()
    params = init_params(spec, 0)
    s = Tensor(np.zeros((2, 64)))
    with pytest.raises(ConfigurationError):
        fuse(Graph(), params, spec, s, s, None)
    end = ModelSpec(variant="EndNet")
    with pytest.raises(ConfigurationError):
        fuse(Graph(), init_params(end, 0), end, s, s, Tensor(np.zeros((2, 15))))
    hsi = ModelSpec(variant="HSI")
    with pytest.raises(ConfigurationError):
        fuse(Graph(), init_params(hsi, 0), hsi, s, None, None)


def test_decode_range_and_shape():
    spec = ModelSpec()
    params = init_params(spec, 0)
    s = Tensor(np.random.default_rng(0).normal(size=(4, 64)) * 3)
    out = decode(Graph(), params, spec, s, "hsi")
    assert out.shape == (4, 144)
    assert np.all((out.data > 0) & (out.data < 1))


def test_decode_zero_final_layer_gives_half():
    spec = ModelSpec()
    params = init_params(spec, 0)
    params.tensors["dec_hsi.2.w"].data[...] = 0
    params.tensors["dec_hsi.2.b"].data[...] = 0
    out = decode(Graph(), params, spec, Tensor(np.ones((3, 64))), "hsi")
    np.testing.assert_array_equal(out.data, 0.5)


# -- composition -----------------------------------------------------------

@pytest.mark.parametrize("variant", list(VARIANTS))
def test_forward_full_is_exact_composition(variant):
    spec = small_spec(variant)
    params = init_params(spec, 1)
    inputs = batch(spec)
    res = forward_full(Graph(), params, spec, inputs, identity, train=False)

    g = Graph()
    info = spec.info
    sem = {m: encode(g, params, spec, inputs[m], m, train=False) for m in info.modalities}
    c_pre = pe_classify(g, params, sem[info.modalities[0]]) if info.pe else None
    if info.fusion:
        s = fuse(g, params, spec, sem.get("hsi"), sem.get("lidar"), c_pre, train=False)
    else:
        s = sem[info.modalities[0]]
    s = power_normalize(g, s)
    c_fin = final_classify(g, params, s)

    assert np.array_equal(res.s.data, s.data)
    assert np.array_equal(res.s_hat.data, s.data)
    assert np.array_equal(res.c_fin.data, c_fin.data)
    for m in info.modalities:
        assert np.array_equal(res.d_hat[m].data, decode(g, params, spec, s, m, train=False).data)
    assert set(res.d_hat) == set(info.modalities)
    if info.pe:
        assert np.array_equal(res.c_pre.data, c_pre.data)
    else:
        assert res.c_pre is None


def test_single_modal_lidar_only_reconstructs_lidar():
    spec = small_spec("LiDAR")
    res = forward_full(Graph(), init_params(spec, 0), spec, batch(spec), identity)
    assert list(res.d_hat) == ["lidar"]
    assert res.c_pre is None


def test_transmitted_symbols_have_unit_power():
    spec = small_spec()
    s, _, _ = transmitter(Graph(), init_params(spec, 0), spec, batch(spec), train=True)
    np.testing.assert_allclose((s.data ** 2).mean(axis=1), 1.0, atol=1e-12)


def test_pe_pathway_is_a_superset():
    pe = small_spec("PE-MMSC")
    end = small_spec("EndNet")
    p_pe, p_end = init_params(pe, 4), init_params(end, 4)
    # EndNet weights on shared coordinates, zero weight on the C_pre columns
    for name, t in p_end.tensors.items():
        target = p_pe.tensors[name]
        if name == "fusion.0.w":
            target.data[...] = 0.0
            target.data[:t.rows] = t.data
        else:
            target.data[...] = t.data
    inputs = batch(pe, n=5, seed=9)
    g = Graph()
    s_pe, _, _ = transmitter(g, p_pe, pe, inputs, train=False)
    s_end, _, _ = transmitter(g, p_end, end, inputs, train=False)
    assert np.array_equal(s_pe.data, s_end.data)


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_gradients_reach_every_parameter(variant):
    spec = small_spec(variant)
    touched = set()
    for seed in range(10):
        params = init_params(spec, seed)
        inputs = batch(spec, n=8, seed=seed)
        g = Graph()
        res = forward_full(g, params, spec, inputs, identity)
        terms = []
        w = Tensor(np.random.default_rng(seed).normal(size=res.c_fin.shape))
        terms.append(g.sum(g.mul(res.c_fin, w)))
        for d in res.d_hat.values():
            terms.append(g.sum(g.mul(d, Tensor(np.random.default_rng(seed + 1).normal(size=d.shape)))))
        if res.c_pre is not None:
            terms.append(g.sum(g.mul(res.c_pre, Tensor(np.random.default_rng(seed + 2).normal(
                size=res.c_pre.shape)))))
        backward(g, g.weighted_sum(terms, [1.0] * len(terms)))
        touched |= {k for k, t in params.trainable().items() if np.any(t.grad != 0)}
    assert touched == set(init_params(spec, 0).trainable())


def test_train_and_eval_batchnorm_modes_differ():
    spec = small_spec()
    params = init_params(spec, 0)
    inputs = batch(spec)
    a = forward_full(Graph(), params, spec, inputs, identity, train=True).c_fin.data
    b = forward_full(Graph(), params, spec, inputs, identity, train=False).c_fin.data
    assert not np.array_equal(a, b)


# -- spec validation -----------------------------------------------------------

def test_unknown_variant():
    with pytest.raises(ConfigurationError):
        ModelSpec(variant="Transformer")


@pytest.mark.parametrize("kw", [dict(encoder_widths=[4, 4]), dict(decoder_widths=[4]),
                                dict(fusion_widths=[4, 4]), dict(K=0),
                                dict(encoder_widths=[4, 0, 4])])
def test_bad_spec(kw):
    with pytest.raises(ConfigurationError):
        ModelSpec(**kw)


def test_param_keys_pure_function_of_spec():
    spec = small_spec()
    a, b = init_params(spec, 0), init_params(spec, 99)
    assert list(a.tensors) == list(b.tensors)
    assert {k: t.shape for k, t in a.tensors.items()} == {k: t.shape for k, t in b.tensors.items()}
    n = sum(t.data.size for t in a.tensors.values())
    assert n == parameter_count(spec)


def test_glorot_init_bounds():
    spec = ModelSpec()
    params = init_params(spec, 0)
    w = params.tensors["enc_hsi.0.w"].data
    assert np.abs(w).max() <= np.sqrt(6 / (144 + 64))
    assert np.all(params.tensors["enc_hsi.0.b"].data == 0)
    assert np.all(params.tensors["enc_hsi.0.gamma"].data == 1)


# -- FLOPs -------------------------------------------------------------------

def test_fc_flops():
    assert fc_flops(2, 3) == 12


def test_pe_flops_default():
    assert count_flops(ModelSpec())["pe"] == 2 * 64 * 15 == 1920


def test_pe_fusion_delta_at_width_64():
    pe = count_flops(ModelSpec(variant="PE-MMSC", fusion_widths=[64]))
    end = count_flops(ModelSpec(variant="EndNet", fusion_widths=[64]))
    assert pe["fusion"] - end["fusion"] == 1920


@pytest.mark.parametrize("m,width", [(15, 96), (3, 10), (7, 200)])
def test_pe_fusion_delta_general(m, width):
    pe = ModelSpec(variant="PE-MMSC", m=m, fusion_widths=[width])
    end = ModelSpec(variant="EndNet", m=m, fusion_widths=[width])
    assert count_flops(pe)["fusion"] - count_flops(end)["fusion"] == 2 * m * width


def test_total_ordering_default_widths():
    tot = {v: count_flops(ModelSpec(variant=v))["total"] for v in ("DeepEndNet", "PE-MMSC",
                                                                   "EndNet")}
    assert tot["DeepEndNet"] > tot["PE-MMSC"] > tot["EndNet"]


def test_flops_absent_columns():
    r = count_flops(ModelSpec(variant="HSI"))
    assert r["lidar"] is None and r["pe"] is None and r["fusion"] is None
    assert r["total"] == r["hsi"]


def test_flops_pure():
    assert count_flops(ModelSpec()) == count_flops(ModelSpec())


# -- checkpoints -------------------------------------------------------------

@pytest.mark.parametrize("variant", list(VARIANTS))
def test_checkpoint_round_trip_bit_exact(variant):
    spec = small_spec(variant)
    params = init_params(spec, 7)
    # move running stats off their defaults
    forward_full(Graph(), params, spec, batch(spec), identity, train=True)
    blob = checkpoint_bytes(spec, params)
    spec2, params2 = parse_checkpoint(blob)
    assert spec2 == spec
    for k, t in params.tensors.items():
        assert t.data.tobytes() == params2.tensors[k].data.tobytes()
    for k, st in params.bn.items():
        assert st.mean.tobytes() == params2.bn[k].mean.tobytes()
        assert st.var.tobytes() == params2.bn[k].var.tobytes()
    assert checkpoint_bytes(spec2, params2) == blob


def test_checkpoint_header():
    blob = checkpoint_bytes(small_spec(), init_params(small_spec(), 0))
    assert blob[:4] == b"PMSC"
    assert struct.unpack("<H", blob[4:6])[0] == 1


def test_checkpoint_bad_magic():
    blob = checkpoint_bytes(small_spec(), init_params(small_spec(), 0))
    with pytest.raises(CheckpointFormatError, match="byte 0"):
        parse_checkpoint(b"XXXX" + blob[4:])


def test_checkpoint_truncated():
    blob = checkpoint_bytes(small_spec(), init_params(small_spec(), 0))
    for cut in (3, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointFormatError):
            parse_checkpoint(blob[:cut])


def test_checkpoint_eval_outputs_survive_round_trip():
    spec = small_spec()
    params = init_params(spec, 2)
    forward_full(Graph(), params, spec, batch(spec), identity, train=True)
    spec2, params2 = parse_checkpoint(checkpoint_bytes(spec, params))
    inputs = batch(spec, seed=5)
    a = forward_full(Graph(), params, spec, inputs, identity, train=False)
    b = forward_full(Graph(), params2, spec2, inputs, identity, train=False)
    assert np.array_equal(a.c_fin.data, b.c_fin.data)


def test_receiver_shapes():
    spec = small_spec()
    c, d = receiver(Graph(), init_params(spec, 0), spec, Tensor(np.ones((3, spec.K))))
    assert c.shape == (3, spec.m)
    assert d["hsi"].shape == (3, spec.d_hsi) and d["lidar"].shape == (3, spec.d_lidar)
