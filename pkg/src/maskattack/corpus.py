"""Synthetic desk-scale corpora: harmonic "speakers" and non-speech clips.

Each speaker is a voice profile (fundamental frequency, three formants,
breathiness). Utterances are rendered from the profile with per-utterance
jitter in pitch, formants and a syllable-like loudness envelope. Non-speech
clips are short chord progressions with decaying partials plus coloured noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import SAMPLE_RATE
from .audio_io import CorpusManifest, ManifestEntry, Waveform, save_manifest, write_wav


@dataclass(frozen=True)
class VoiceProfile:
    name: str
    f0: float
    formants: tuple
    bandwidths: tuple
    breath: float

    @property
    def sex(self) -> str:
        """Nominal voice class from the pitch: "M" below 165 Hz, else "F"."""
        return "M" if self.f0 < 165.0 else "F"


def make_speakers(n: int, seed: int = 0) -> list[VoiceProfile]:
    rng = np.random.default_rng(seed)
    f0s = np.linspace(95.0, 260.0, n)
    rng.shuffle(f0s)
    speakers = []
    for i in range(n):
        f1 = rng.uniform(300, 900)
        f2 = rng.uniform(1000, 2400)
        f3 = rng.uniform(2500, 3800)
        speakers.append(VoiceProfile(
            name=f"spk{i:02d}", f0=float(f0s[i]), formants=(f1, f2, f3),
            bandwidths=tuple(rng.uniform(60, 200, 3)), breath=float(rng.uniform(0.02, 0.15)),
        ))
    return speakers


def _envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    syllables = rng.uniform(3.0, 5.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * syllables * t + rng.uniform(0, 2 * np.pi)) ** 2
    ramp = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.03)
    return env * ramp


def _formant_gain(freqs, formants, bandwidths):
    gain = np.zeros_like(freqs)
    for fc, bw in zip(formants, bandwidths):
        gain += 1.0 / (1.0 + ((freqs - fc) / bw) ** 2)
    return gain + 0.02


def render_utterance(profile: VoiceProfile, rng: np.random.Generator, duration: float = 1.0,
                     peak: float = 12000.0) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = profile.f0 * rng.uniform(0.95, 1.05)
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    glide = np.linspace(1.0, rng.uniform(0.92, 1.08), n)
    inst_f0 = f0 * vibrato * glide
    phase = 2 * np.pi * np.cumsum(inst_f0) / SAMPLE_RATE
    formants = tuple(f * rng.uniform(0.96, 1.04) for f in profile.formants)
    signal = np.zeros(n)
    n_harm = int(7600 // (f0 * 1.1))
    for h in range(1, n_harm + 1):
        g = _formant_gain(np.array([h * f0]), formants, profile.bandwidths)[0] / h**0.5
        signal += g * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    noise = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) *
                         _formant_gain(np.fft.rfftfreq(n, 1 / SAMPLE_RATE), formants, profile.bandwidths), n)
    signal = signal / np.abs(signal).max() + profile.breath * noise / (np.abs(noise).max() + 1e-12)
    signal *= _envelope(n, rng)
    return signal / np.abs(signal).max() * peak * rng.uniform(0.7, 1.0)


def render_music(rng: np.random.Generator, duration: float = 1.0, peak: float = 12000.0) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    n_chords = rng.integers(2, 5)
    bounds = np.linspace(0, n, n_chords + 1).astype(int)
    for a, b in zip(bounds[:-1], bounds[1:]):
        root = 110.0 * 2 ** (rng.integers(0, 24) / 12)
        tt = t[: b - a]
        decay = np.exp(-tt * rng.uniform(1.0, 4.0))
        for semis in (0, 4, 7, 12):
            f = root * 2 ** (semis / 12)
            for h in range(1, 6):
                if h * f < 7800:
                    out[a:b] += decay * np.sin(2 * np.pi * h * f * tt + rng.uniform(0, 2 * np.pi)) / h**1.5
    noise = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) / (1 + np.fft.rfftfreq(n, 1 / SAMPLE_RATE) / 500), n)
    out = out / np.abs(out).max() + 0.05 * noise / np.abs(noise).max()
    return out / np.abs(out).max() * peak * rng.uniform(0.6, 1.0)


@dataclass
class DeskCorpus:
    speakers: list[VoiceProfile]
    waves: list[np.ndarray]
    labels: list[str]


def make_corpus(n_speakers: int = 10, n_utterances: int = 50, duration: float = 1.0,
                seed: int = 0) -> DeskCorpus:
    speakers = make_speakers(n_speakers, seed)
    rng = np.random.default_rng(seed + 1)
    waves, labels = [], []
    for spk in speakers:
        for _ in range(n_utterances):
            waves.append(render_utterance(spk, rng, duration))
            labels.append(spk.name)
    return DeskCorpus(speakers, waves, labels)


def make_music(n_clips: int = 20, duration: float = 1.0, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed + 7)
    return [render_music(rng, duration) for _ in range(n_clips)]


def _attack_entries(speakers, rng, n_attack):
    """Held-out (profile, target, mode) triples cycling through the four sex pairings."""
    by_sex = {sx: [s for s in speakers if s.sex == sx] for sx in "MF"}
    modes = [(a, b) for a in "MF" for b in "MF" if by_sex[a] and len(by_sex[b]) > (a == b)]
    out = []
    for i in range(n_attack):
        a, b = modes[i % len(modes)]
        source = by_sex[a][rng.integers(len(by_sex[a]))]
        targets = [s for s in by_sex[b] if s is not source]
        out.append((source, targets[rng.integers(len(targets))], f"{a}2{b}"))
    return out


def write_corpus(out_dir, n_speakers: int = 10, n_utterances: int = 50, n_attack: int = 0,
                 n_music: int = 0, duration: float = 1.0, seed: int = 0) -> CorpusManifest:
    """Render a desk corpus to WAV files and manifests.

    ``train.csv`` lists the training utterances (no targets). With ``n_attack``
    held-out utterances ``attack.csv`` assigns each a wrong target speaker and a
    sex-pairing mode (M2M, M2F, F2M, F2F); with ``n_music`` clips ``music.csv``
    lists non-speech originals with true label ``none``.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(n_speakers, n_utterances, duration, seed)
    entries, counts = [], {}
    for wave, label in zip(corpus.waves, corpus.labels):
        counts[label] = counts.get(label, 0) + 1
        rel = f"wav/{label}_{counts[label]:03d}.wav"
        write_wav(Waveform(wave), out / rel)
        entries.append(ManifestEntry(rel, label, None))
    manifest = CorpusManifest(entries, out)
    save_manifest(manifest, out / "train.csv")

    rng = np.random.default_rng(seed + 2)
    if n_attack:
        attack = []
        for i, (spk, target, mode) in enumerate(_attack_entries(corpus.speakers, rng, n_attack)):
            rel = f"wav/heldout_{i:03d}_{spk.name}.wav"
            write_wav(Waveform(render_utterance(spk, rng, duration)), out / rel)
            attack.append(ManifestEntry(rel, spk.name, target.name, mode))
        save_manifest(CorpusManifest(attack, out), out / "attack.csv")
    if n_music:
        music = []
        for i, clip in enumerate(make_music(n_music, duration, seed)):
            rel = f"wav/music_{i:03d}.wav"
            write_wav(Waveform(clip), out / rel)
            target = corpus.speakers[rng.integers(len(corpus.speakers))].name
            music.append(ManifestEntry(rel, None, target, "music"))
        save_manifest(CorpusManifest(music, out), out / "music.csv")
    return manifest
