"""Log-mel front end and audio embedding network."""

import numpy as np
import pytest

from avcc import audio
from avcc.errors import InputError
from avcc.nn import seed_stream
from avcc.tensor import Tape, Tensor
from conftest import central_difference


def sine(freq, seconds=1.0, rate=audio.SAMPLE_RATE, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


class TestLogMel:
    def test_output_shape_is_64x96(self, rng):
        for n in (audio.SAMPLE_RATE, audio.SAMPLE_RATE - audio.HOP,
                  audio.SAMPLE_RATE + audio.HOP):
            lms = audio.compute_log_mel(rng.uniform(-1, 1, n))
            assert lms.shape == (64, 96)

    def test_zero_waveform_hits_the_log_floor(self):
        lms = audio.compute_log_mel(np.zeros(audio.SAMPLE_RATE))
        np.testing.assert_allclose(lms, np.log(audio.LOG_FLOOR))

    def test_all_values_at_least_log_floor(self, rng):
        lms = audio.compute_log_mel(rng.uniform(-1, 1, audio.SAMPLE_RATE))
        assert (lms >= np.log(audio.LOG_FLOOR)).all()

    def test_determinism(self, rng):
        w = rng.uniform(-1, 1, audio.SAMPLE_RATE)
        a = audio.compute_log_mel(w)
        b = audio.compute_log_mel(w.copy())
        assert np.array_equal(a, b)

    def test_pure_tone_band_is_constant_and_correct(self):
        # oracle: band centers from the mel map; the tone's band is the one
        # whose center is nearest in mel scale
        freq = 1000.0
        edges_mel = np.linspace(0.0, float(audio.hz_to_mel(audio.SAMPLE_RATE / 2)),
                                audio.N_MELS + 2)
        centers = edges_mel[1:-1]
        expected_band = int(np.argmin(np.abs(centers - float(audio.hz_to_mel(freq)))))
        lms = audio.compute_log_mel(sine(freq))
        bands = lms.argmax(axis=0)
        assert (bands == bands[0]).all()
        assert bands[0] == expected_band

    def test_rejects_empty_and_multichannel(self):
        with pytest.raises(InputError):
            audio.compute_log_mel(np.zeros(0))
        with pytest.raises(InputError):
            audio.compute_log_mel(np.zeros((2, 16000)))

    def test_filterbank_rows_positive_and_covering(self):
        bank = audio.mel_filterbank()
        assert (bank.sum(axis=1) > 0).all()
        freqs = np.arange(bank.shape[1]) * audio.SAMPLE_RATE / audio.WINDOW
        edges = audio.mel_to_hz(
            np.linspace(0.0, audio.hz_to_mel(audio.SAMPLE_RATE / 2),
                        audio.N_MELS + 2))
        first_center, last_center = edges[1], edges[-2]
        inside = (freqs > first_center) & (freqs < last_center)
        assert (bank.sum(axis=0)[inside] > 0).all()


class TestWavIO:
    def test_roundtrip(self, tmp_path, rng):
        samples = rng.uniform(-0.9, 0.9, audio.SAMPLE_RATE)
        path = tmp_path / "t.wav"
        audio.write_wav(path, samples)
        back = audio.read_wav(path)
        assert back.sample_rate == audio.SAMPLE_RATE
        assert np.max(np.abs(back.samples - samples)) < 1.0 / 32768

    def test_lms_dump_roundtrip(self, tmp_path, rng):
        lms = rng.normal(size=(64, 96))
        path = tmp_path / "t.lms"
        audio.dump_lms(path, lms)
        blob = path.read_bytes()
        assert blob[:4] == b"LMS1"
        assert len(blob) == 8 + 4 * 64 * 96
        back = audio.load_lms(path)
        np.testing.assert_allclose(back, lms.astype(np.float32))


class TestAudioEmbedder:
    def test_output_shape_default_width(self, rng):
        net = audio.AudioEmbedder(144, seed_stream(0), dropout=0.0)
        net.set_training(False)
        emb = net(Tensor(rng.normal(size=(64, 96))))
        assert emb.shape == (144, 1)

    def test_zero_weights_give_zero_embedding(self, rng):
        net = audio.AudioEmbedder(16, seed_stream(0), dropout=0.0)
        net.set_training(False)
        for _, p in net.named_parameters():
            if p.data.ndim >= 2:
                p.data = np.zeros_like(p.data)
        emb = net(Tensor(rng.normal(size=(64, 96))))
        np.testing.assert_allclose(emb.data, 0.0, atol=1e-12)

    def test_finite_for_finite_input(self, rng):
        net = audio.AudioEmbedder(36, seed_stream(3), dropout=0.0)
        net.set_training(False)
        emb = net(Tensor(rng.normal(scale=10.0, size=(64, 96))))
        assert np.isfinite(emb.data).all()

    def test_first_conv_gradient_matches_finite_differences(self, rng):
        from avcc import ops
        from avcc.gradcheck import _CoordCheck

        net = audio.AudioEmbedder(8, seed_stream(1), stages=2, base_channels=4,
                                  dropout=0.0)
        lms = Tensor(rng.normal(size=(64, 96)))
        net.set_training(True)
        for _ in range(3):
            net(lms)  # warm the running statistics
        net.set_training(False)  # fixed statistics keep the fd stencil clean
        first = net.blocks[0].conv.weight

        def fn():
            return float(ops.sum_all(net(lms)).data)

        with Tape() as tape:
            tape.backward(ops.sum_all(net(lms)))
        an = first.grad.copy()
        flat = np.random.default_rng(0).choice(first.size, size=12, replace=False)
        for fi in flat:
            idx = np.unravel_index(fi, first.shape)
            rel, _ = _CoordCheck(fn, first, idx, float(an[idx])).certify()
            assert rel < 1e-4, f"coordinate {idx}: rel err {rel}"
