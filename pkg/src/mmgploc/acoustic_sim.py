"""Synthetic room-acoustics data generation.

Multichannel measurements are rendered with the mirror-image method for
rectangular rooms: every wall reflection is represented by an image source
whose tap lands at the rounded sample delay with 1/(4*pi*d) spherical
attenuation.  The inner accumulation loop runs in a compiled extension when
available and in a vectorized NumPy fallback otherwise.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

if os.environ.get("MMGPLOC_PURE_PYTHON"):
    from . import _imagesource_np as _imagesource
    _BACKEND = "numpy"
else:
    try:
        from . import _imagesource  # type: ignore[no-redef]
        _BACKEND = "cython"
    except ImportError:
        from . import _imagesource_np as _imagesource
        _BACKEND = "numpy"

# tail beyond the nominal decay time kept in each impulse response, so the
# -60 dB point stays resolvable after truncation
_TAIL_FACTOR = 1.25


def image_source_backend() -> str:
    """Name of the active image-source backend ("cython" or "numpy")."""
    return _BACKEND


@dataclass
class SceneConfig:
    """Static description of one simulated room and its microphone layout.

    ``mic_positions`` holds M pairs of 3-D positions in meters, one pair per
    node.  ``snr_db`` may be ``math.inf`` to disable sensor noise.
    ``max_reflection_order`` is either an integer cap or ``"auto"``, which
    picks the order beyond which the wall-reflection attenuation alone
    exceeds 60 dB.
    """

    room_dims: np.ndarray
    mic_positions: np.ndarray
    t60: float
    snr_db: float
    sample_rate: float
    sound_speed: float = 343.0
    max_reflection_order: int | str = "auto"

    def __post_init__(self):
        self.room_dims = np.asarray(self.room_dims, dtype=float)
        self.mic_positions = np.asarray(self.mic_positions, dtype=float)
        if self.room_dims.shape != (3,) or np.any(self.room_dims <= 0):
            raise ValueError("room_dims must be 3 positive lengths")
        if self.mic_positions.ndim != 3 or self.mic_positions.shape[1:] != (2, 3):
            raise ValueError("mic_positions must have shape (M, 2, 3): M nodes of 2 mics")
        if self.mic_positions.shape[0] < 1:
            raise ValueError("need at least one node")
        for pos in self.mic_positions.reshape(-1, 3):
            _check_inside(pos, self.room_dims, "microphone")
        if self.t60 < 0:
            raise ValueError("t60 must be >= 0")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.sound_speed <= 0:
            raise ValueError("sound_speed must be positive")
        if isinstance(self.max_reflection_order, str):
            if self.max_reflection_order != "auto":
                raise ValueError("max_reflection_order must be an int or 'auto'")
        elif self.max_reflection_order < 0:
            raise ValueError("max_reflection_order must be >= 0")

    @property
    def num_nodes(self) -> int:
        return self.mic_positions.shape[0]

    def flat_mics(self) -> np.ndarray:
        """All microphones as a (2M, 3) array, node-major order."""
        return self.mic_positions.reshape(-1, 3)


@dataclass
class SourceSetSpec:
    """Positions plus excitation recipe for one record set.

    ``signal_kind`` is one of ``"wgn"`` (white Gaussian noise),
    ``"speech"`` (the band-occupancy surrogate) or ``"file"`` (external
    audio, ``audio_path`` required).
    """

    positions: np.ndarray
    signal_kind: str = "wgn"
    duration_s: float = 5.0
    seed: int = 0
    audio_path: str | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.size and self.positions.shape[1] != 3:
            raise ValueError("positions must be 3-vectors")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.signal_kind not in ("wgn", "speech", "file"):
            raise ValueError(f"unknown signal kind {self.signal_kind!r}")
        if self.signal_kind == "file" and not self.audio_path:
            raise ValueError("signal_kind 'file' requires audio_path")

    @property
    def count(self) -> int:
        return self.positions.shape[0]


class LabeledSpec(SourceSetSpec):
    pass


class UnlabeledSpec(SourceSetSpec):
    pass


class TestSpec(SourceSetSpec):
    pass


@dataclass
class MeasurementRecord:
    """One simulated acoustic event captured by every microphone.

    ``signals`` has shape (2M, n): channels are node-major, two mics per
    node.  ``true_position`` is set for labelled records and carried for
    test records only inside evaluation-side structures.
    """

    signals: np.ndarray
    sample_rate: float
    num_nodes: int
    true_position: np.ndarray | None = None
    record_id: str = ""

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=float)
        if self.signals.ndim != 2 or self.signals.shape[0] != 2 * self.num_nodes:
            raise ValueError("signals must be (2*num_nodes, n)")
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("non-finite samples in measurement")

    def node_channels(self, node_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Reference and secondary channel of a node; nodes are labelled 1..M."""
        if not 1 <= node_index <= self.num_nodes:
            raise ValueError(f"node_index {node_index} out of range 1..{self.num_nodes}")
        base = 2 * (node_index - 1)
        return self.signals[base], self.signals[base + 1]


def _check_inside(pos, dims, what: str):
    pos = np.asarray(pos, dtype=float)
    if pos.shape != (3,):
        raise ValueError(f"{what} position must be a 3-vector")
    if np.any(pos <= 0) or np.any(pos >= dims):
        raise ValueError(f"{what} position {pos.tolist()} outside room {dims.tolist()}")


def sabine_absorption(room_dims, t60: float, sound_speed: float = 343.0) -> float:
    """Uniform wall absorption that realizes ``t60`` via Sabine's formula.

    Raises when the requested decay time is infeasible for the geometry
    (absorption would leave (0, 1)).
    """
    dims = np.asarray(room_dims, dtype=float)
    volume = float(np.prod(dims))
    surface = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2])
    alpha = 24.0 * math.log(10.0) * volume / (sound_speed * surface * t60)
    if not 0.0 < alpha < 1.0:
        raise ValueError(
            f"infeasible t60/geometry pair: Sabine absorption {alpha:.3f} not in (0, 1) "
            f"for t60={t60} s and room {dims.tolist()}"
        )
    return alpha


def _reflection_and_order(scene: SceneConfig) -> tuple[float, int]:
    """Wall reflection coefficient and the effective reflection-order cap."""
    if scene.t60 == 0:
        beta = 0.0
        auto_order = 0
    else:
        alpha = sabine_absorption(scene.room_dims, scene.t60, scene.sound_speed)
        beta = math.sqrt(1.0 - alpha)
        # beta**order < 1e-3 <=> the path is more than 60 dB down in energy
        auto_order = int(math.ceil(math.log(1e-3) / math.log(beta)))
    if scene.max_reflection_order == "auto":
        return beta, auto_order
    return beta, int(scene.max_reflection_order)


def rir_duration(scene: SceneConfig, source_pos, mic_pos) -> float:
    """Length in seconds of the impulse response for one source/mic pair."""
    d = float(np.linalg.norm(np.asarray(source_pos, float) - np.asarray(mic_pos, float)))
    return d / scene.sound_speed + _TAIL_FACTOR * scene.t60 + 8.0 / scene.sample_rate


def simulate_rir(scene: SceneConfig, source_pos, mic_pos, backend=None) -> np.ndarray:
    """Room impulse response between one source and one microphone.

    ``backend`` overrides the import-time kernel selection; it must expose
    ``accumulate_images`` with the shared signature.
    """
    source_pos = np.asarray(source_pos, dtype=float)
    mic_pos = np.asarray(mic_pos, dtype=float)
    _check_inside(source_pos, scene.room_dims, "source")
    _check_inside(mic_pos, scene.room_dims, "microphone")
    if np.linalg.norm(source_pos - mic_pos) < 1e-9:
        raise ValueError("degenerate geometry: source coincides with microphone")

    beta, max_order = _reflection_and_order(scene)
    n = int(math.ceil(rir_duration(scene, source_pos, mic_pos) * scene.sample_rate))
    samples_per_meter = scene.sample_rate / scene.sound_speed
    # half-extent of the image lattice: images farther than the response
    # length (plus one wrap for the mirrored offsets) cannot land in it
    half = [int(math.ceil(n / (2.0 * L * samples_per_meter))) + 1 for L in scene.room_dims]

    kernel = backend if backend is not None else _imagesource
    rir = np.zeros(n)
    rc = kernel.accumulate_images(
        rir,
        scene.room_dims[0], scene.room_dims[1], scene.room_dims[2],
        source_pos[0], source_pos[1], source_pos[2],
        mic_pos[0], mic_pos[1], mic_pos[2],
        beta, half[0], half[1], half[2], max_order, samples_per_meter,
    )
    if rc != 0:
        raise ValueError("degenerate geometry: an image source coincides with the microphone")
    return rir


def white_noise_signal(duration_s: float, sample_rate: float, rng) -> np.ndarray:
    """Unit-variance white Gaussian excitation."""
    n = int(round(duration_s * sample_rate))
    return rng.standard_normal(n)


def speech_surrogate_signal(duration_s: float, sample_rate: float, rng) -> np.ndarray:
    """Speech-band stand-in: low-passed white noise under a slow random envelope.

    A fixed 2nd-order low-pass at 2.5 kHz concentrates energy where the
    feature band lives, and a 4 Hz random envelope mimics syllabic
    amplitude modulation.  Normalized to unit RMS.
    """
    n = int(round(duration_s * sample_rate))
    sos = butter(2, min(2500.0, 0.45 * sample_rate), btype="low", fs=sample_rate, output="sos")
    x = sosfilt(sos, rng.standard_normal(n))
    ctrl = rng.uniform(size=max(int(math.ceil(duration_s * 4.0)) + 2, 2))
    t = np.arange(n) / sample_rate
    env = 0.15 + 0.85 * np.interp(t * 4.0, np.arange(ctrl.size), ctrl)
    x *= env
    return x / max(np.sqrt(np.mean(x**2)), 1e-12)


def load_audio_signal(path: str, sample_rate: float, duration_s: float) -> np.ndarray:
    """External excitation from a WAV file; must match the scene sample rate."""
    from scipy.io import wavfile

    fs, raw = wavfile.read(path)
    if fs != sample_rate:
        raise ValueError(f"audio file rate {fs} != scene rate {sample_rate}; resample first")
    data = np.asarray(raw, dtype=float)
    if data.ndim > 1:
        data = data[:, 0]
    if np.issubdtype(np.asarray(raw).dtype, np.integer):
        data = data / max(np.abs(data).max(), 1.0)
    n = int(round(duration_s * sample_rate))
    if data.size < n:
        raise ValueError(f"audio file shorter ({data.size} samples) than requested {n}")
    return data[:n]


def make_signal(spec: SourceSetSpec, index: int, sample_rate: float) -> np.ndarray:
    """Excitation for record ``index`` of a set, deterministic in (seed, index)."""
    rng = np.random.default_rng((spec.seed, index, 0))
    if spec.signal_kind == "wgn":
        return white_noise_signal(spec.duration_s, sample_rate, rng)
    if spec.signal_kind == "speech":
        return speech_surrogate_signal(spec.duration_s, sample_rate, rng)
    return load_audio_signal(spec.audio_path, sample_rate, spec.duration_s)


def render_measurement(scene: SceneConfig, source_pos, source_signal, seed) -> MeasurementRecord:
    """Propagate one excitation to every microphone and add sensor noise.

    Each channel is the full linear convolution of the excitation with its
    impulse response.  White Gaussian noise is scaled per channel so the
    ratio of clean-signal power over the active support to the noise
    variance equals ``scene.snr_db``; ``snr_db == inf`` keeps the clean
    convolutions exactly.
    """
    source_signal = np.asarray(source_signal, dtype=float)
    if source_signal.size == 0:
        raise ValueError("empty source signal")
    mics = scene.flat_mics()
    rirs = [simulate_rir(scene, source_pos, mic) for mic in mics]
    n_out = source_signal.size + max(r.size for r in rirs) - 1
    clean = np.zeros((len(rirs), n_out))
    for i, rir in enumerate(rirs):
        y = fftconvolve(source_signal, rir)
        clean[i, : y.size] = y

    if math.isinf(scene.snr_db):
        signals = clean
    else:
        rng = np.random.default_rng(seed)
        signals = np.empty_like(clean)
        snr_lin = 10.0 ** (scene.snr_db / 10.0)
        for i in range(clean.shape[0]):
            active = np.flatnonzero(np.abs(clean[i]) > 1e-12 * np.abs(clean[i]).max())
            support = clean[i, active[0] : active[-1] + 1]
            noise_var = float(np.mean(support**2)) / snr_lin
            signals[i] = clean[i] + math.sqrt(noise_var) * rng.standard_normal(n_out)

    return MeasurementRecord(
        signals=signals,
        sample_rate=scene.sample_rate,
        num_nodes=scene.num_nodes,
        true_position=np.asarray(source_pos, dtype=float),
    )


def generate_dataset(scene: SceneConfig, labeled: LabeledSpec, unlabeled: UnlabeledSpec,
                     test: TestSpec, out_dir, spectral=None, config_hash: str = "") -> str:
    """Render every record of the three sets and write the dataset directory.

    Returns the manifest path.  Record ids are stable and the rendering of
    each record depends only on (set seed, record index), so regeneration
    with the same specs is bit-identical.
    """
    from . import dataio

    sets = [("labeled", labeled), ("unlabeled", unlabeled), ("test", test)]
    records = []
    for role, spec in sets:
        for i in range(spec.count):
            _check_inside(spec.positions[i], scene.room_dims, f"{role} source")
            signal = make_signal(spec, i, scene.sample_rate)
            rec = render_measurement(scene, spec.positions[i], signal, (spec.seed, i, 1))
            rec.record_id = f"{role}_{i:04d}"
            records.append((role, rec))
    return dataio.write_dataset(out_dir, scene, records, spectral=spectral,
                                config_hash=config_hash)
