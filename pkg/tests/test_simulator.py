"""Tests for picknet.simulator (room sampling, image-method RIRs, noise and dataset generation)."""

import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.signal import welch

from conftest import synthetic_speech
from picknet.dsp import AudioClip
from picknet.error_handler import InvalidInputError, OutOfRangeError
from picknet.settings import SimulationConfig
from picknet.simulator import (CALIBRATION_TOLERANCE, HOTH_BANDS_DB, MIC_SPACING_RANGE, SPEED_OF_SOUND, T60_RANGE,
                               RoomScene, calibrate_reflection, convolve, derive_seeds, eyring_t60, hoth_gain, hoth_noise, image_method_rir,
                               inject_transient, load_record_audio, make_training_sample, mix_at_snr,
                               noise_gain, read_manifest, rir_length, sample_room, scene_violations,
                               schroeder_t60, signal_power, simulate_dataset, split_clip,
                               synthetic_transients, t60_to_reflection, windowed_sinc_taps)

FS = 16000


def _box_scene(reflection, dims=(6.0, 5.0, 4.0), t60=0.4):
    return RoomScene(depth=dims[0], width=dims[1], height=dims[2], reflection=reflection, t60=t60,
                     speaker_pos=(2.0, 2.5, 1.5), mic_pos=((2.4, 2.7, 1.3), (4.5, 1.2, 1.0)))


def _oracle_rir(scene, src, mic, length, max_order):
    """反射回数 max_order までの鏡像を素朴に列挙して足し合わせる"""
    h = np.zeros(length)
    dims = scene.dims
    src, mic = np.asarray(src), np.asarray(mic)
    for nx in range(-2, 3):
        for qx in (0, 1):
            for ny in range(-2, 3):
                for qy in (0, 1):
                    for nz in range(-2, 3):
                        for qz in (0, 1):
                            n, q = np.array([nx, ny, nz]), np.array([qx, qy, qz])
                            order = int(np.sum(np.abs(n - q) + np.abs(n)))
                            if order > max_order:
                                continue
                            image = (1 - 2 * q) * src + 2 * n * dims
                            d = float(np.linalg.norm(image - mic))
                            idx, coeffs = windowed_sinc_taps(np.array([d / SPEED_OF_SOUND * FS]))
                            amp = scene.reflection ** order / (4 * np.pi * d)
                            for i, c in zip(idx[0], coeffs[0]):
                                if 0 <= i < length:
                                    h[i] += amp * c
    return h


# ---------------------------------------------------------------------------
# Room sampling
# ---------------------------------------------------------------------------


class TestSampleRoom:
    @pytest.mark.parametrize("seed", range(25))
    def test_constraints_hold(self, seed):
        scene = sample_room(seed, calibrate=False)
        assert scene_violations(scene) == []
        assert T60_RANGE[0] <= scene.t60 <= T60_RANGE[1]
        assert 0.0 < scene.reflection < 1.0
        spacing = np.linalg.norm(np.subtract(scene.mic_pos[1], scene.mic_pos[0]))
        assert MIC_SPACING_RANGE[0] - 1e-9 <= spacing <= MIC_SPACING_RANGE[1] + 1e-9

    def test_deterministic(self):
        assert sample_room(7) == sample_room(7)
        assert sample_room(7) != sample_room(8)

    def test_more_far_mics(self):
        scene = sample_room(3, n_far_mics=3)
        assert scene.n_mics == 4
        assert all(len(m) == 3 for m in scene.mic_pos)

    def test_dict_round_trip(self):
        scene = sample_room(11)
        assert RoomScene.from_dict(json.loads(json.dumps(scene.to_dict()))) == scene

    def test_violations_reported(self):
        bad = _box_scene(0.5, t60=2.0)
        problems = scene_violations(bad)
        assert any("t60" in p for p in problems)

    def test_speaker_outside(self):
        scene = RoomScene(6.0, 5.0, 4.0, 0.5, 0.4, (7.0, 1.0, 1.0), ((6.5, 1.0, 1.2),))
        assert any("speaker" in p for p in scene_violations(scene))


class TestEyring:
    @pytest.mark.parametrize("t60", [0.2, 0.35, 0.6])
    def test_round_trip(self, t60):
        dims = (7.0, 9.0, 3.0)
        assert eyring_t60(t60_to_reflection(t60, dims), dims) == pytest.approx(t60, rel=1e-10)

    def test_monotone_in_t60(self):
        dims = (6.0, 5.0, 4.0)
        betas = [t60_to_reflection(t, dims) for t in np.linspace(0.2, 0.6, 9)]
        assert np.all(np.diff(betas) > 0)
        assert all(0 < b < 1 for b in betas)

    def test_bad_t60(self):
        with pytest.raises(OutOfRangeError):
            t60_to_reflection(0.0, (5.0, 5.0, 3.0))
        with pytest.raises(OutOfRangeError):
            t60_to_reflection(float("nan"), (5.0, 5.0, 3.0))

    def test_bad_dims(self):
        with pytest.raises(InvalidInputError):
            t60_to_reflection(0.3, (5.0, -1.0, 3.0))


# ---------------------------------------------------------------------------
# Room impulse responses
# ---------------------------------------------------------------------------


class TestImageMethod:
    def test_anechoic_is_single_sinc(self):
        scene = _box_scene(0.0)
        src, mic = scene.speaker_pos, scene.mic_pos[1]
        h = image_method_rir(scene, src, mic, 2000).samples
        d = float(np.linalg.norm(np.subtract(src, mic)))
        idx, coeffs = windowed_sinc_taps(np.array([d / SPEED_OF_SOUND * FS]))
        expected = np.zeros(2000)
        expected[idx[0]] = coeffs[0] / (4 * np.pi * d)
        np.testing.assert_allclose(h, expected, atol=1e-15)

    def test_integer_delay_tap_is_delta(self):
        idx, coeffs = windowed_sinc_taps(np.array([100.0]))
        assert idx[0, 40] == 100
        assert coeffs[0, 40] == pytest.approx(1.0)
        np.testing.assert_allclose(np.delete(coeffs[0], 40), 0.0, atol=1e-12)

    def test_matches_brute_force_low_order(self):
        scene = _box_scene(0.7)
        src, mic = scene.speaker_pos, scene.mic_pos[0]
        h = image_method_rir(scene, src, mic, 3000, max_order=2).samples
        np.testing.assert_allclose(h, _oracle_rir(scene, src, mic, 3000, 2), rtol=1e-9, atol=1e-12)

    def test_direct_path_peak(self):
        scene = _box_scene(t60_to_reflection(0.4, (6.0, 5.0, 4.0)))
        src, mic = scene.speaker_pos, scene.mic_pos[0]
        h = image_method_rir(scene, src, mic, rir_length(scene)).samples
        d = float(np.linalg.norm(np.subtract(src, mic)))
        assert abs(int(np.argmax(np.abs(h))) - d / SPEED_OF_SOUND * FS) <= 1.0

    def test_calibrated_reverberation_time(self):
        dims = (6.0, 5.0, 4.0)
        t60 = 0.3
        base = _box_scene(0.0, dims, t60)
        length = rir_length(base)
        beta = calibrate_reflection(t60, dims, base.speaker_pos, base.mic_pos, length)
        assert 0.0 < beta < 1.0
        scene = replace(base, reflection=beta)
        estimates = [schroeder_t60(image_method_rir(scene, scene.speaker_pos, m, length)) for m in scene.mic_pos]
        assert np.exp(np.mean(np.log(estimates))) == pytest.approx(t60, rel=CALIBRATION_TOLERANCE + 1e-3)
        for estimate in estimates:
            assert estimate == pytest.approx(t60, rel=0.25)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force_random_rooms(self, seed):
        rng = np.random.default_rng(100 + seed)
        dims = rng.uniform(2.0, 4.0, size=3)
        src = tuple(rng.uniform(0.2, 0.8, size=3) * dims)
        mic = tuple(rng.uniform(0.2, 0.8, size=3) * dims)
        scene = RoomScene(depth=dims[0], width=dims[1], height=dims[2], reflection=float(rng.uniform(0.3, 0.95)),
                          t60=0.3, speaker_pos=src, mic_pos=(mic,))
        h = image_method_rir(scene, src, mic, 1000, max_order=2).samples
        assert np.max(np.abs(h - _oracle_rir(scene, src, mic, 1000, 2))) < 1e-12

    def test_direct_path_amplitude_ratio(self):
        checked = 0
        for seed in range(1000):
            scene = sample_room(seed, calibrate=False)
            spk = np.asarray(scene.speaker_pos)
            d_near, d_far = (float(np.linalg.norm(np.subtract(m, spk))) for m in scene.mic_pos)
            if d_far <= 1.0:
                continue
            # 直接音の振幅は分数遅延フィルタの総和 (DC 利得はほぼ 1) で測る
            near, far = (np.sum(image_method_rir(scene, spk, m, 1500, max_order=0).samples) for m in scene.mic_pos)
            assert near > far
            assert near / far == pytest.approx(d_far / d_near, rel=0.01)
            checked += 1
            if checked == 100:
                break
        assert checked == 100

    def test_rir_length(self):
        assert rir_length(_box_scene(0.5, t60=0.4)) == 6400
        assert rir_length(_box_scene(0.5, t60=0.01)) == 1600

    def test_rejects_outside_points(self):
        scene = _box_scene(0.5)
        with pytest.raises(InvalidInputError):
            image_method_rir(scene, (7.0, 1.0, 1.0), scene.mic_pos[0], 100)


class TestConvolve:
    def setup_method(self):
        self.x = AudioClip(np.random.default_rng(0).standard_normal(500))

    def test_identity(self):
        assert np.allclose(convolve(self.x, AudioClip(np.array([1.0]))).samples, self.x.samples)

    def test_shift(self):
        rir = np.zeros(10)
        rir[5] = 1.0
        out = convolve(self.x, AudioClip(rir)).samples
        assert len(out) == 500
        np.testing.assert_allclose(out[5:], self.x.samples[:-5], atol=1e-12)
        np.testing.assert_allclose(out[:5], 0.0, atol=1e-12)

    def test_matches_direct_convolution(self):
        rir = np.random.default_rng(1).standard_normal(64)
        out = convolve(self.x, AudioClip(rir)).samples
        np.testing.assert_allclose(out, np.convolve(self.x.samples, rir)[:500], atol=1e-10)

    def test_rate_mismatch(self):
        with pytest.raises(InvalidInputError):
            convolve(self.x, AudioClip(np.ones(3), 8000))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_sampled_rooms_hit_target_t60(seed):
    scene = sample_room(seed)
    length = rir_length(scene)
    for mic in scene.mic_pos:
        estimate = schroeder_t60(image_method_rir(scene, scene.speaker_pos, mic, length))
        assert estimate == pytest.approx(scene.t60, rel=0.25)


# ---------------------------------------------------------------------------
# Noise and mixing
# ---------------------------------------------------------------------------


class TestHothNoise:
    def test_unit_rms(self):
        assert np.sqrt(signal_power(hoth_noise(32000, 0).samples)) == pytest.approx(1.0, rel=1e-12)

    def test_deterministic(self):
        assert np.array_equal(hoth_noise(4000, 5).samples, hoth_noise(4000, 5).samples)
        assert not np.array_equal(hoth_noise(4000, 5).samples, hoth_noise(4000, 6).samples)

    def test_gain_at_band_centers(self):
        centers = np.array(sorted(HOTH_BANDS_DB))
        expected = 10 ** (np.array([HOTH_BANDS_DB[f] for f in centers]) / 20)
        np.testing.assert_allclose(hoth_gain(centers), expected, rtol=1e-12)

    def test_spectral_tilt(self):
        noise = hoth_noise(FS * 20, 1).samples
        f, psd = welch(noise, fs=FS, nperseg=1024)

        def level(hz):
            return 10 * np.log10(psd[np.argmin(np.abs(f - hz))])

        assert level(125.0) - level(4000.0) == pytest.approx(32.4 - 9.8, abs=2.0)
        assert level(500.0) > level(2000.0)


class TestMixAtSnr:
    def test_gain_for_ten_db(self):
        speech = AudioClip(np.ones(100))
        noise = AudioClip(np.ones(100))
        assert noise_gain(speech, noise, 10.0) == pytest.approx(0.3162, abs=1e-4)
        np.testing.assert_allclose(mix_at_snr(speech, noise, 10.0).samples, 1.0 + np.sqrt(0.1))

    @pytest.mark.parametrize("snr", [-5.0, 0.0, 12.5, 30.0])
    def test_achieved_snr(self, snr):
        rng = np.random.default_rng(2)
        speech = AudioClip(rng.standard_normal(4000))
        noise = AudioClip(3.0 * rng.standard_normal(4000))
        residual = mix_at_snr(speech, noise, snr).samples - speech.samples
        assert 10 * np.log10(signal_power(speech.samples) / signal_power(residual)) == pytest.approx(snr, abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            mix_at_snr(AudioClip(np.ones(10)), AudioClip(np.ones(11)), 0.0)

    def test_silent_noise(self):
        with pytest.raises(InvalidInputError):
            mix_at_snr(AudioClip(np.ones(10)), AudioClip(np.zeros(10)), 0.0)


class TestTransients:
    def test_only_one_channel_touched(self):
        rng = np.random.default_rng(3)
        clips = [AudioClip(rng.standard_normal(FS)) for _ in range(3)]
        bank = synthetic_transients(0)
        out, info = inject_transient(clips, bank[1], rng_seed=4)
        changed = [not np.array_equal(a.samples, b.samples) for a, b in zip(clips, out)]
        assert sum(changed) == 1 and changed[info.channel]
        diff = np.nonzero(out[info.channel].samples - clips[info.channel].samples)[0]
        assert diff.min() >= info.onset and diff.max() < info.onset + info.duration
        assert 0.1 <= info.to_dict()["dur_s"] <= 0.3

    def test_level_relative_to_channel(self):
        clips = [AudioClip(np.random.default_rng(5).standard_normal(FS))]
        noise = AudioClip(np.random.default_rng(6).standard_normal(FS))
        out, info = inject_transient(clips, noise, rng_seed=7, level_db_range=(0.0, 0.0))
        added = (out[0].samples - clips[0].samples)[info.onset:info.onset + info.duration]
        assert signal_power(added) == pytest.approx(signal_power(clips[0].samples), rel=1e-9)

    def test_bank_shapes(self):
        bank = synthetic_transients(1, n=6)
        assert len(bank) == 6
        for clip in bank:
            assert len(clip) == int(0.3 * FS)
            assert np.max(np.abs(clip.samples)) == pytest.approx(1.0, rel=1e-6)

    def test_clip_too_short(self):
        with pytest.raises(InvalidInputError):
            inject_transient([AudioClip(np.ones(100))], AudioClip(np.ones(FS)), 0)


# ---------------------------------------------------------------------------
# Training samples and datasets
# ---------------------------------------------------------------------------


class TestTrainingSample:
    @pytest.fixture(scope="class")
    def sample(self):
        config = SimulationConfig(inject_transient=False)
        return synthetic_speech(1.5, seed=1), make_training_sample(synthetic_speech(1.5, seed=1), 42, config=config)

    def test_snr_range(self, sample):
        _, s = sample
        for snr, noisy, clean in zip(s.snr_db, s.noisy, s.clean_reverb):
            assert 10.0 <= snr <= 20.0
            measured = 10 * np.log10(signal_power(clean.samples) / signal_power(noisy.samples - clean.samples))
            assert measured == pytest.approx(snr, abs=1e-6)

    def test_clean_reverb_is_convolution(self, sample):
        clean, s = sample
        for rir, rev in zip(s.rirs, s.clean_reverb):
            np.testing.assert_allclose(convolve(clean, rir).samples, rev.samples)
            assert len(rev) == len(clean)

    def test_near_mic_first_and_scene_valid(self, sample):
        _, s = sample
        assert s.near_index == 0
        assert s.transient is None
        assert scene_violations(s.scene) == []

    def test_deterministic(self):
        clean = synthetic_speech(1.0, seed=2)
        a = make_training_sample(clean, 9)
        b = make_training_sample(clean, 9)
        for x, y in zip(a.noisy, b.noisy):
            assert np.array_equal(x.samples, y.samples)
        assert a.transient == b.transient

    def test_child_seeds_distinct(self):
        seeds = derive_seeds(0, 5)
        assert len(set(seeds)) == 5
        assert derive_seeds(0, 5) == seeds


class TestDataset:
    def test_split_clip(self):
        pieces = split_clip(AudioClip(np.zeros(int(25.5 * FS))), max_seconds=10.0)
        assert [len(p) for p in pieces] == [10 * FS, 10 * FS, int(5.5 * FS)]
        assert len(split_clip(AudioClip(np.zeros(int(20.5 * FS))), 10.0)) == 2

    def test_simulate_and_read_back(self, tmp_path):
        clips = [(f"utt{i}", synthetic_speech(1.0, seed=i)) for i in range(2)]
        manifest = simulate_dataset(clips, str(tmp_path / "data"), 3, seed=1)
        records = read_manifest(manifest)
        assert [r["id"] for r in records] == ["000000", "000001", "000002"]
        for record in records:
            assert record["source"] in ("utt0", "utt1")
            noisy = load_record_audio(record, "noisy")
            clean = load_record_audio(record, "clean")
            assert len(noisy) == len(clean) == 2
            assert 0.1 <= record["transient"]["dur_s"] <= 0.3

    def test_same_seed_same_manifest(self, tmp_path):
        clips = [("utt", synthetic_speech(1.0, seed=0))]
        a = simulate_dataset(clips, str(tmp_path / "a"), 2, seed=5)
        b = simulate_dataset(clips, str(tmp_path / "b"), 2, seed=5)
        assert (tmp_path / "a" / "manifest.jsonl").read_text() == (tmp_path / "b" / "manifest.jsonl").read_text()
        assert a != b

    def test_read_manifest_rejects_bad_scene(self, tmp_path):
        record = {"id": "x", "scene": _box_scene(0.5, t60=3.0).to_dict(), "noisy": [], "clean": []}
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(InvalidInputError):
            read_manifest(str(path))

    def test_read_manifest_rejects_garbage(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(InvalidInputError):
            read_manifest(str(path))
