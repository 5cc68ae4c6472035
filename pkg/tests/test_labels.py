import json

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from hprosody.dsp import AudioBuffer, FrameTrack, analyze
from hprosody.errors import ConfigError, DataError, FormatError, ShapeError
from hprosody.labels import (ProsodyLabelSet, Quantizer, alignment_to_document, dequantize,
                             extract_rule_labels, fit_quantizer, load_quantizer,
                             parse_alignment, quantize, read_labels, rule_token_values,
                             save_quantizer, token_average, write_labels)

SR, HOP = 22050, 256


def doc(phones, words):
    return {"utterance_id": "u", "words": words,
            "phones": [{"phone": p, "start_s": s, "end_s": e, "word_index": w}
                       for p, s, e, w in phones]}


@st.composite
def alignments(draw, max_phones=8):
    """Random alignment on the frame grid plus its frame count."""
    n_words = draw(st.integers(1, 4))
    phones = []
    t = 0
    for w in range(n_words):
        for _ in range(draw(st.integers(1, 3))):
            d = draw(st.integers(1, 6))
            phones.append((f"p{len(phones) % 3}", t * HOP / SR, (t + d) * HOP / SR, w))
            t += d
    document = doc(phones, [f"w{i}" for i in range(n_words)])
    return parse_alignment(document, t), t


# -- parse_alignment -------------------------------------------------------------

def test_two_tenth_second_phones():
    al = parse_alignment(doc([("a", 0.0, 0.1, 0), ("b", 0.1, 0.2, 0)], ["x"]), 17)
    assert al.durations("phoneme").tolist() == [9, 8]


def test_single_phone_takes_everything():
    al = parse_alignment(doc([("a", 0.0, 0.5, 0)], ["x"]), 40)
    assert al.durations("phoneme").tolist() == [40]
    assert al.durations("word").tolist() == [40]


@pytest.mark.parametrize("phones,words", [
    ([("a", 0.2, 0.1, 0)], ["x"]),                                  # end before start
    ([("a", 0.0, 0.2, 0), ("b", 0.1, 0.3, 0)], ["x"]),              # overlap
    ([("a", 0.0, 0.1, 1), ("b", 0.1, 0.2, 0)], ["x", "y"]),         # word order
    ([("a", 0.0, 0.1, 0)], ["x", "y"]),                             # word without phones
    ([("a", 0.0, 0.1, 0)], [""]),                                   # empty word
    ([], ["x"]),
])
def test_malformed_alignments(phones, words):
    with pytest.raises(FormatError):
        parse_alignment(doc(phones, words), 50)


def test_alignment_json_text_and_missing_fields():
    with pytest.raises(FormatError):
        parse_alignment("{not json", 10)
    with pytest.raises(FormatError):
        parse_alignment({"phones": []}, 10)


@given(alignments())
def test_durations_partition_frames(data):
    al, n = data
    assert al.durations("phoneme").sum() == n == al.durations("word").sum()
    assert np.all(al.durations("phoneme") >= 1)
    assert al.phones_per_word().sum() == len(al.phonemes)


@given(alignments())
def test_document_round_trip(data):
    al, n = data
    again = parse_alignment(alignment_to_document(al), n)
    assert again == al


# -- token_average ----------------------------------------------------------------

def _al(durs, words=None):
    t = 0
    phones = []
    words = words or [0] * len(durs)
    for i, (d, w) in enumerate(zip(durs, words)):
        phones.append((f"p{i}", t * HOP / SR, (t + d) * HOP / SR, w))
        t += d
    return parse_alignment(doc(phones, [f"w{i}" for i in range(max(words) + 1)]), t)


def test_token_average_examples():
    assert token_average([1, 2, 3, 4], _al([2, 2])).tolist() == [1.5, 3.5]
    assert token_average([5.0] * 7, _al([3, 4])).tolist() == [5.0, 5.0]
    out = token_average([100, 0, 200], _al([3]), voiced=np.array([True, False, True]))
    assert out.tolist() == [150.0]


def test_token_average_unvoiced_token_is_zero():
    out = token_average([0, 0, 120, 130], _al([2, 2]), voiced=np.array([0, 0, 1, 1], bool))
    assert out.tolist() == [0.0, 125.0]


def test_token_average_length_mismatch():
    with pytest.raises(ShapeError):
        token_average([1, 2, 3], _al([2, 2]))


@given(alignments())
def test_partition_property(data):
    al, n = data
    for level in ("phoneme", "word"):
        assert np.all(token_average(np.ones(n), al, level) == 1.0)


@given(alignments(), st.integers(0, 2**31 - 1))
def test_level_consistency(data, seed):
    al, n = data
    x = np.random.default_rng(seed).normal(size=n)
    ph = token_average(x, al, "phoneme")
    d = al.durations("phoneme")
    per_word = al.phones_per_word()
    bounds = np.concatenate(([0], np.cumsum(per_word)))
    reavg = [np.sum(ph[a:b] * d[a:b]) / np.sum(d[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    np.testing.assert_allclose(token_average(x, al, "word"), reavg, atol=1e-9, rtol=0)


# -- quantizer --------------------------------------------------------------------

def test_linear_bin_width_and_endpoints():
    q = fit_quantizer(np.linspace(0, 255, 1000), 256, "linear")
    assert q.bin_width == (255.0 - 0.0) / 256
    assert fit_quantizer([0.0, 100.0, 256.0], 256, "linear").bin_width == 1.0
    assert quantize(q, 0.0) == 0 and quantize(q, 255.0) == 255
    assert quantize(q, -50.0) == 0 and quantize(q, 1e6) == 255


def test_bin_midpoint_fixed_point():
    q = Quantizer(256, "linear", 0.0, 256.0)
    assert quantize(q, 7.5) == 7 and dequantize(q, 7) == 7.5


def test_degenerate_and_nonfinite():
    with pytest.raises(DataError):
        fit_quantizer([3.0, 3.0, 3.0])
    with pytest.raises(DataError):
        quantize(Quantizer(4, "linear", 0, 1), float("nan"))
    with pytest.raises(ConfigError):
        Quantizer(1, "linear", 0, 1)
    with pytest.raises(DataError):
        dequantize(Quantizer(4, "linear", 0, 1), 4)


def test_log_fit_ignores_unvoiced_zeros():
    q = fit_quantizer([0.0, 0.0, 100.0, 400.0], 256, "log")
    assert q.min == 100.0 and quantize(q, 0.0) == 0


def test_ties_go_to_lower_bin():
    q = Quantizer(4, "linear", 0.0, 4.0)
    assert quantize(q, 1.0) == 0 and quantize(q, 2.0) == 1


@pytest.mark.parametrize("scale", ["linear", "log"])
def test_round_trip_1000_values(scale, rng):
    q = Quantizer(256, scale, 60.0, 600.0)
    v = rng.uniform(0.0, 800.0, 1000)
    b = quantize(q, v)
    # measured on the binning axis; for log that is log-Hz
    assert np.all(np.abs(q.position(v) - (b + 0.5)) * q.bin_width <= q.bin_width / 2)
    np.testing.assert_allclose(q.centers()[b], q.axis(v), rtol=0, atol=q.bin_width / 2 + 1e-12)
    np.testing.assert_allclose(q._fwd(dequantize(q, b)), q.centers()[b], rtol=1e-14)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_monotone(a, b):
    q = Quantizer(256, "linear", -100.0, 100.0)
    lo, hi = min(a, b), max(a, b)
    assert quantize(q, lo) <= quantize(q, hi)


@given(st.floats(1e-3, 1e4), st.floats(1e-3, 1e4))
def test_monotone_log(a, b):
    q = Quantizer(256, "log", 50.0, 900.0)
    assume(a != b)
    lo, hi = min(a, b), max(a, b)
    assert quantize(q, lo) <= quantize(q, hi)


def test_quantizer_persistence(tmp_path):
    q = Quantizer(256, "log", 71.5, 612.25)
    save_quantizer(tmp_path / "q.json", q)
    assert load_quantizer(tmp_path / "q.json") == q
    assert json.loads((tmp_path / "q.json").read_text()) == {
        "n_bins": 256, "scale": "log", "min": 71.5, "max": 612.25}


# -- rule labels ------------------------------------------------------------------

def _tone(freq, n_frames, amp=0.5):
    n = (n_frames - 1) * HOP + 1024
    t = np.arange(n) / SR
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), SR)


def test_flat_tone_word_bin():
    audio = _tone(220.0, 60)
    al = _al([60])
    f0_q = Quantizer(256, "log", 71.0, 800.0)
    en_q = Quantizer(256, "linear", 0.0, 400.0)
    ls = extract_rule_labels(audio, al, "word", f0_q, en_q)
    assert ls.f0_bin.tolist() == [quantize(f0_q, 220.0)]
    track = analyze(audio).track
    assert ls.energy_bin.tolist() == [quantize(en_q, track.energy.mean())]


def test_silence_maps_to_bin_of_zero():
    audio = AudioBuffer(np.zeros((39) * HOP + 1024), SR)
    f0_q = Quantizer(256, "log", 71.0, 800.0)
    en_q = Quantizer(256, "linear", 0.0, 10.0)
    ls = extract_rule_labels(audio, _al([20, 20]), "phoneme", f0_q, en_q)
    assert ls.f0.tolist() == [0.0, 0.0]
    assert ls.f0_bin.tolist() == [quantize(f0_q, 0.0)] * 2


def test_one_phone_word_levels_agree():
    audio = _tone(150.0, 30)
    al = _al([12, 10, 8], words=[0, 1, 1])
    f0_q = Quantizer(256, "log", 71.0, 800.0)
    en_q = Quantizer(256, "linear", 0.0, 400.0)
    ph = extract_rule_labels(audio, al, "phoneme", f0_q, en_q)
    wd = extract_rule_labels(audio, al, "word", f0_q, en_q)
    assert ph.f0_bin[0] == wd.f0_bin[0] and ph.energy_bin[0] == wd.energy_bin[0]
    assert ph.f0[0] == wd.f0[0]


def test_rule_values_deterministic():
    audio = _tone(180.0, 25)
    al = _al([10, 15])
    t1, t2 = analyze(audio).track, analyze(audio).track
    a, b = rule_token_values(t1, al, "phoneme"), rule_token_values(t2, al, "phoneme")
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_rule_values_need_energy():
    with pytest.raises(DataError):
        rule_token_values(FrameTrack(np.zeros(4), np.zeros(4, bool)), _al([4]), "phoneme")


def test_frame_mismatch_is_an_error():
    with pytest.raises(ShapeError):
        extract_rule_labels(_tone(200.0, 20), _al([10, 11]), "phoneme",
                            Quantizer(4, "linear", 0, 1), Quantizer(4, "linear", 0, 1))


# -- label sets -----------------------------------------------------------------

def test_label_set_json_round_trip(tmp_path):
    sets = [
        ProsodyLabelSet("a", "rule_based", "word", f0_bin=[1, 255], energy_bin=[0, 3],
                        f0=[100.0, 0.0], energy=[1.0, 2.0]),
        ProsodyLabelSet("b", "neural_based", "phoneme", codeword_index=[7],
                        latent=[[0.1, -0.2, 0.3]]),
    ]
    write_labels(tmp_path / "l.jsonl", sets)
    back = read_labels(tmp_path / "l.jsonl")
    assert back[0].f0_bin.tolist() == [1, 255] and back[0].f0.tolist() == [100.0, 0.0]
    assert back[1].codeword_index.tolist() == [7]
    np.testing.assert_array_equal(back[1].latent, [[0.1, -0.2, 0.3]])
    assert (tmp_path / "l.jsonl").read_text().count("\n") == 2


def test_label_set_validation():
    with pytest.raises(FormatError):
        ProsodyLabelSet("a", "rule_based", "word", f0_bin=[256], energy_bin=[0])
    with pytest.raises(FormatError):
        ProsodyLabelSet("a", "neural_based", "word", codeword_index=[1, 2], latent=[[0, 0, 0]])
    with pytest.raises(ConfigError):
        ProsodyLabelSet("a", "other", "word")


def test_rule_targets_are_bin_centres():
    q = Quantizer(256, "linear", 0.0, 256.0)
    ls = ProsodyLabelSet("a", "rule_based", "word", f0_bin=[3], energy_bin=[10])
    np.testing.assert_array_equal(ls.targets(q, q), [[3.5, 10.5]])
    with pytest.raises(ConfigError):
        ls.targets()
