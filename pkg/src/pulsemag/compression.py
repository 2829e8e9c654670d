"""CRF-controlled H.264 encoding through an external ffmpeg binary.

CRF 0 is treated as "uncompressed": frames are copied untouched instead of
being run through the encoder. Binary lookup order: ``$PMAG_FFMPEG``, ``ffmpeg``
on PATH, then the binary bundled with ``imageio-ffmpeg`` if that is installed.
"""
from __future__ import annotations

import functools
import logging
import os
import re
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, read_frames, write_frames
from .errors import CompressionError, ConfigError, DecodeError, EncoderNotFoundError
from .models import VideoClip

log = logging.getLogger(__name__)

CRF_MAX = 51


@dataclass(frozen=True)
class CompressionProfile:
    codec: str = "h264"
    crf: int | None = 0
    pixel_format: str = "yuv420p"
    encoder_version: str = ""
    bitrate_kbps: float = 0.0
    target_kbps: float | None = None
    frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def validate_crf(crf) -> int:
    if isinstance(crf, bool) or not isinstance(crf, (int, np.integer)) or not 0 <= crf <= CRF_MAX:
        raise ConfigError(f"crf must be an integer in [0, {CRF_MAX}], got {crf!r}")
    return int(crf)


def find_ffmpeg() -> str:
    env = os.environ.get("PMAG_FFMPEG")
    if env:
        if Path(env).exists() or shutil.which(env):
            return env
        raise EncoderNotFoundError(f"PMAG_FFMPEG points to {env!r}, which does not exist")
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg

        return imageio_ffmpeg.get_ffmpeg_exe()
    except Exception:  # noqa: BLE001 - any failure here means "not available"
        pass
    raise EncoderNotFoundError(
        "ffmpeg not found; install ffmpeg, `pip install imageio-ffmpeg`, or set PMAG_FFMPEG to the binary"
    )


def find_ffprobe() -> str | None:
    env = os.environ.get("PMAG_FFPROBE")
    if env:
        return env
    if os.environ.get("PMAG_FFMPEG"):
        sibling = Path(os.environ["PMAG_FFMPEG"]).with_name("ffprobe")
        return str(sibling) if sibling.exists() else None
    return shutil.which("ffprobe")


@functools.lru_cache(maxsize=8)
def _version(binary: str) -> str:
    out = subprocess.run([binary, "-version"], capture_output=True, text=True, check=True).stdout
    return out.splitlines()[0].strip() if out else "unknown"


def encoder_version() -> str:
    return _version(find_ffmpeg())


def _run(cmd: list[str], path) -> subprocess.CompletedProcess:
    proc = subprocess.run(cmd, capture_output=True)
    if proc.returncode != 0:
        tail = proc.stderr.decode(errors="replace").strip().splitlines()[-3:]
        raise DecodeError(f"ffmpeg failed ({' | '.join(tail)})", path)
    return proc


def raw_bitrate_kbps(width: int, height: int, fps: float, channels: int = 3, bits: int = 8) -> float:
    return width * height * channels * bits * fps / 1000.0


def _stream_info(path: Path) -> dict:
    ffmpeg = find_ffmpeg()
    proc = subprocess.run([ffmpeg, "-hide_banner", "-i", str(path)], capture_output=True)
    err = proc.stderr.decode(errors="replace")
    m = re.search(r"Video: .*?(\d{2,5})x(\d{2,5})", err)
    if not m:
        raise DecodeError("no video stream found", path)
    fps = re.search(r"([\d.]+) fps", err)
    return {"width": int(m.group(1)), "height": int(m.group(2)), "fps": float(fps.group(1)) if fps else None}


def decode(path) -> VideoClip:
    """Decode a video file to a (T, H, W, 3) clip in [0, 1]; a frame directory is read directly."""
    path = Path(path)
    if path.is_dir():
        return VideoClip(read_frames(path), 30.0)
    if not path.exists():
        raise DecodeError("file not found", path)
    info = _stream_info(path)
    w, h = info["width"], info["height"]
    proc = _run([find_ffmpeg(), "-v", "error", "-i", str(path), "-f", "rawvideo", "-pix_fmt", "rgb24", "-"], path)
    buf = np.frombuffer(proc.stdout, dtype=np.uint8)
    if buf.size == 0 or buf.size % (w * h * 3):
        raise DecodeError("decoded byte count does not match frame geometry", path)
    frames = buf.reshape(-1, h, w, 3).astype(np.float32) / 255.0
    return VideoClip(frames, info["fps"] or 30.0)


def count_frames(path) -> int:
    path = Path(path)
    if path.is_dir():
        return len(list(path.glob("*.png")))
    return len(decode(path))


def probe_bitrate(path, fps: float = 30.0) -> float:
    """Average bitrate in kb/s.

    Encoded files: total container size over duration (the ffprobe ``format
    bit_rate`` definition; ffprobe is used when present). Frame directories:
    the raw 24-bit RGB rate.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DecodeError("no frames to probe", path)
        import cv2

        h, w = cv2.imread(str(files[0])).shape[:2]
        return raw_bitrate_kbps(w, h, fps)
    ffprobe = find_ffprobe()
    if ffprobe:
        out = subprocess.run(
            [ffprobe, "-v", "error", "-show_entries", "format=bit_rate", "-of", "default=nw=1:nk=1", str(path)],
            capture_output=True,
            text=True,
        )
        if out.returncode == 0 and out.stdout.strip().isdigit():
            return int(out.stdout.strip()) / 1000.0
    info = _stream_info(path)
    n = count_frames(path)
    duration = n / (info["fps"] or fps)
    return path.stat().st_size * 8 / duration / 1000.0


def encode_crf(src, crf: int, out, fps: float = 30.0, target_kbps: float | None = None) -> tuple[Path, CompressionProfile]:
    """Encode a frame directory (or an in-memory clip) with libx264.

    ``crf == 0`` copies the frames to ``out`` (a directory) untouched. For
    ``crf > 0`` ``out`` is the ``.mp4`` path. ``target_kbps`` switches to
    constant-bitrate mode and ignores ``crf``.
    """
    crf = validate_crf(crf)
    out = Path(out)
    if isinstance(src, VideoClip):
        tmp = out.parent / (out.stem + "_src")
        write_frames(src.frames, tmp)
        fps, src = src.fps, tmp
    src = Path(src)
    if not any(src.glob("*.png")):
        raise ConfigError(f"no PNG frames in {src}")

    if crf == 0 and target_kbps is None:
        if out.resolve() != src.resolve():
            shutil.copytree(src, out, dirs_exist_ok=True)
        n = count_frames(out)
        return out, CompressionProfile(
            codec="raw", crf=0, pixel_format="rgb24", encoder_version="bypass",
            bitrate_kbps=probe_bitrate(out, fps), frames=n,
        )

    ffmpeg = find_ffmpeg()
    out.parent.mkdir(parents=True, exist_ok=True)
    cmd = [ffmpeg, "-y", "-v", "error", "-framerate", f"{fps:g}", "-i", str(src / "%06d.png"), "-c:v", "libx264"]
    if target_kbps is None:
        cmd += ["-crf", str(crf)]
    else:
        k = f"{int(round(target_kbps))}k"
        cmd += ["-b:v", k, "-minrate", k, "-maxrate", k, "-bufsize", k]
    cmd += ["-pix_fmt", "yuv420p", "-fps_mode", "passthrough", "-an", str(out)]
    _run(cmd, out)
    n_in, n_out = count_frames(src), count_frames(out)
    if n_in != n_out:
        raise CompressionError(f"frame count changed during encoding: {n_in} -> {n_out}", [str(out)])
    return out, CompressionProfile(
        codec="h264", crf=None if target_kbps else crf, pixel_format="yuv420p",
        encoder_version=_version(ffmpeg), bitrate_kbps=probe_bitrate(out, fps),
        target_kbps=target_kbps, frames=n_out,
    )


def _compress_record(rec: dict, manifest: DatasetManifest, out_root: Path, crf: int, target_kbps) -> dict:
    sid = rec["id"]
    sdir = out_root / sid
    sdir.mkdir(parents=True, exist_ok=True)
    if "frames" in rec:
        src = manifest.path_of(rec["frames"])
    else:
        src = sdir / "_decoded"
        write_frames(decode(manifest.path_of(rec["video"])).frames, src)
    if crf == 0 and target_kbps is None:
        dst, prof = encode_crf(src, 0, sdir / "frames", manifest.fps)
        new = {"frames": f"{sid}/frames"}
    else:
        dst, prof = encode_crf(src, crf, sdir / "video.mp4", manifest.fps, target_kbps)
        new = {"video": f"{sid}/video.mp4"}
    shutil.copyfile(manifest.path_of(rec["gt"]), sdir / "gt.csv")
    out = {k: v for k, v in rec.items() if k not in ("frames", "video", "profile")}
    out.update(new, gt=f"{sid}/gt.csv", crf=crf if target_kbps is None else None, profile=prof.to_dict())
    if "mask" in rec:
        shutil.copyfile(manifest.path_of(rec["mask"]), sdir / "mask.png")
        out["mask"] = f"{sid}/mask.png"
    return out


def compress_dataset(manifest: DatasetManifest, crf: int, out_root, workers: int = 1, target_kbps: float | None = None) -> DatasetManifest:
    """Re-encode every sample at one CRF; ground truth files are copied byte for byte."""
    crf = validate_crf(crf)
    out_root = Path(out_root)
    ids = [r["id"] for r in manifest.records]
    if len(set(ids)) != len(ids):
        raise CompressionError("duplicate sample ids would share an output path", ids)
    version = encoder_version() if (crf or target_kbps) else "bypass"
    records, failed = [None] * len(ids), []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {i: pool.submit(_compress_record, r, manifest, out_root, crf, target_kbps) for i, r in enumerate(manifest.records)}
        for i, fut in futures.items():
            try:
                records[i] = fut.result()
            except Exception as exc:  # noqa: BLE001 - collected and re-raised as one error
                failed.append(f"{ids[i]}: {exc}")
    if failed:
        raise CompressionError(f"{len(failed)} sample(s) failed to compress: {failed}", failed)
    prov = dict(manifest.provenance, crf=crf, target_kbps=target_kbps, encoder_version=version, source_root=str(manifest.root))
    out = DatasetManifest(out_root, records, manifest.fps, manifest.size, prov)
    out.save()
    return out
