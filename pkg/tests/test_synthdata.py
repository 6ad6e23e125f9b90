import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rkto.config import load_config
from rkto.exceptions import ConsistencyError, FormatError, InvalidInputError, ParseError
from rkto.policy import exact_kl_to, sft_loss_and_grad, FeaturizedPolicy, TabularPolicy, snapshot
from rkto.optim import AdamW
from rkto.synthdata import (GenerationConfig, PreferenceExample, generate_dataset, read_dataset, split,
                            write_dataset)
from tests.conftest import DATA_DIR

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
GOLDEN = os.path.join(DATA_DIR, "golden")


def test_same_seed_bit_identical(tiny_gen):
    a, ma, ta = generate_dataset(tiny_gen)
    b, mb, tb = generate_dataset(tiny_gen)
    assert a == b
    assert ma.to_dict() == mb.to_dict()
    assert ta.to_bytes() == tb.to_bytes()


def test_seed_argument_overrides_config(tiny_gen):
    a = generate_dataset(tiny_gen, seed=9)[0]
    assert a != generate_dataset(tiny_gen)[0]
    assert a == generate_dataset(GenerationConfig(**{**tiny_gen.to_dict(), "seed": 9}))[0]


def test_two_examples_one_class_share_support():
    cfg = GenerationConfig(n_examples=2, n_classes=1, vocab_size=6, grid_side=2, seed=1)
    ex, manifest, teacher = generate_dataset(cfg)
    assert {e.context.cls for e in ex} == {0}
    assert sum(manifest.counts.values()) == 2
    for e in ex:
        assert teacher.log_prob(e.context, e.y_pref.without("mask"))[0] > -np.inf


def test_examples_are_well_formed(tiny_gen, tiny_data):
    ex, manifest, _ = tiny_data
    G = tiny_gen.grid_side
    assert manifest.n_examples == len(ex) == tiny_gen.n_examples
    assert len({e.id for e in ex}) == len(ex)
    for e in ex:
        assert e.y_pref.plan == tiny_gen.plan()
        assert e.mask.shape == (G, G)
        assert all(t >= 2 for k, toks in e.y_pref.segments if k != "mask" for t in toks)


def test_reflection_tied_to_intermediate_in_teacher(tiny_gen, tiny_data):
    table = tiny_data[2].params["table"]
    # plan: thinking, intermediate, reflection, output -> positions 0, 1, 2, 3..4
    assert np.array_equal(table[:, 1], table[:, 2])


def test_desired_fraction_within_two_percent():
    cfg = GenerationConfig(n_examples=2000, grid_side=0, seed=4)
    ex = generate_dataset(cfg)[0]
    assert abs(np.mean([e.desired for e in ex]) - 0.9) <= 0.02


def test_non_desired_examples_corrupt_reflection_or_mask():
    cfg = GenerationConfig(n_examples=400, seed=2)
    ex = generate_dataset(cfg)[0]
    bad = [e for e in ex if not e.desired]
    assert bad
    # the mask block of a corrupted example disagrees with its reference in at least one cell more often
    # than the desired ones do on average
    def flips(e):
        return int(np.sum(np.reshape(e.y_pref.segment("mask"), e.mask.shape) != e.mask))
    assert np.mean([flips(e) for e in bad]) > np.mean([flips(e) for e in ex if e.desired])


def test_output_token_frequencies_match_teacher():
    cfg = GenerationConfig(n_examples=50_000, n_classes=2, vocab_size=6, grid_side=0, thinking_len=0,
                           intermediate_len=1, reflection_len=1, output_len=1, prompt_len=1, seed=5)
    ex, _, teacher = generate_dataset(cfg)
    table = teacher.params["table"]
    for c in range(2):
        toks = np.array([e.y_pref.segment("output")[0] for e in ex if e.context.cls == c])
        n = toks.size
        z = table[c, 2]
        p = np.exp(z - z.max())
        p /= p.sum()
        counts = np.bincount(toks, minlength=6)
        se = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * se + 1e-6)


@pytest.mark.parametrize("kw", [dict(n_examples=1), dict(vocab_size=5), dict(grid_side=-1),
                                dict(output_len=0), dict(mask_noise=1.5), dict(class_weights=(1.0,)),
                                dict(intermediate_len=0)])
def test_inconsistent_config_rejected(kw):
    with pytest.raises(InvalidInputError):
        GenerationConfig(**kw)


def test_teacher_is_recoverable_by_sft():
    cfg = GenerationConfig(n_examples=200, n_classes=2, vocab_size=6, grid_side=0, thinking_len=0,
                           intermediate_len=1, reflection_len=1, output_len=2, seed=0)
    ex, _, teacher = generate_dataset(cfg)
    plan = cfg.text_plan()
    assert exact_kl_to(teacher, snapshot(teacher), ex[0].context, plan) == 0.0
    pol = TabularPolicy(6, 2, 4, init_scale=1.0, seed=0)
    classes = {e.context.cls: e.context for e in ex}

    def kl():
        return [exact_kl_to(teacher, snapshot(pol), x, plan) for x in classes.values()]

    before = kl()
    batch = [(e.context, e.y_pref) for e in ex if e.desired]
    opt = AdamW()
    for _ in range(500):
        _, g = sft_loss_and_grad(pol, batch)
        opt.step(pol.params, g, 0.01)
    after = kl()
    assert all(a <= 0.5 * b for a, b in zip(after, before))


# -- file format --------------------------------------------------------------------

def test_round_trip_1000(tmp_path):
    ex, manifest, _ = generate_dataset(GenerationConfig(n_examples=1000, seed=6))
    write_dataset(ex, manifest, tmp_path)
    back, m2 = read_dataset(tmp_path)
    assert back == ex
    assert m2.to_dict() == manifest.to_dict()


def test_golden_dataset_is_stable():
    cfg = load_config(os.path.join(ROOT, "configs", "minimal.yaml"))
    ex, manifest, _ = generate_dataset(cfg.generation)
    golden, gm = read_dataset(GOLDEN)
    assert golden == ex
    assert gm.to_dict() == manifest.to_dict()
    assert golden[0].context.features[0] == -1.163690912491194
    assert golden[0].y_pref.segment("output") == (3, 5)


def test_golden_dataset_bytes(tmp_path):
    ex, manifest, _ = generate_dataset(load_config(os.path.join(ROOT, "configs", "minimal.yaml")).generation)
    write_dataset(ex, manifest, tmp_path)
    for name in ("examples.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == open(os.path.join(GOLDEN, name), "rb").read()


@pytest.fixture
def written(tmp_path, tiny_data):
    write_dataset(tiny_data[0], tiny_data[1], tmp_path)
    return tmp_path


def test_truncated_line_names_the_line(written):
    path = written / "examples.jsonl"
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    with pytest.raises(ParseError) as err:
        read_dataset(written)
    assert err.value.line == 40
    assert "40" in str(err.value)


def test_malformed_line(written):
    path = written / "examples.jsonl"
    lines = path.read_text().splitlines(True)
    lines[3] = "{not json\n"
    path.write_text("".join(lines))
    with pytest.raises(ParseError) as err:
        read_dataset(written)
    assert err.value.line == 4


def test_unknown_record_field(written):
    path = written / "examples.jsonl"
    lines = path.read_text().splitlines(True)
    lines[0] = lines[0].replace('{"context"', '{"extra":1,"context"')
    path.write_text("".join(lines))
    with pytest.raises(ParseError):
        read_dataset(written)


def test_count_mismatch(written):
    path = written / "examples.jsonl"
    lines = path.read_text().splitlines(True)
    path.write_text("".join(lines[:-1]))
    with pytest.raises(ConsistencyError):
        read_dataset(written)


def test_version_mismatch(written):
    path = written / "manifest.json"
    path.write_text(path.read_text().replace('"rkto-dataset/', '"other-dataset/'))
    with pytest.raises(FormatError):
        read_dataset(written)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)


# -- split ----------------------------------------------------------------------------

def test_split_half_of_ten(tiny_data):
    ex = tiny_data[0][:10]
    tr, va = split(ex, 0.5, 0)
    assert len(tr) == len(va) == 5
    assert not {e.id for e in tr} & {e.id for e in va}


@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_split_is_seeded_partition(n, frac, seed):
    items = list(range(n))
    tr, va = split(items, frac, seed)
    assert sorted(tr + va) == items
    assert (tr, va) == split(items, frac, seed)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_split_fraction_out_of_range(frac):
    with pytest.raises(InvalidInputError):
        split([1, 2, 3], frac, 0)
