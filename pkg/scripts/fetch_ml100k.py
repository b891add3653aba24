"""Fetch MovieLens-100K ``u.data`` into data/ml-100k/.

Tries the GroupLens archive first. If that host is unreachable, falls back to
the copy bundled in the ``pytorch-widedeep`` wheel (fetched with ``pip
download``, read with pandas/pyarrow). Either way the result is checked against
the known checksum of the original file.

    python scripts/fetch_ml100k.py [--dest data/ml-100k]
"""
import argparse
import hashlib
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
MD5 = "6e47046882bad158b0efbb84cd5cb987"
WHEEL_MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data")


def from_wheel():
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "pytorch-widedeep==1.7.0",
                        "--no-deps", "-d", tmp, "-q"], check=True)
        wheel = next(Path(tmp).glob("*.whl"))
        raw = zipfile.ZipFile(wheel).read(WHEEL_MEMBER)
    df = pd.read_parquet(io.BytesIO(raw))
    lines = (f"{u}\t{i}\t{r}\t{t}\n" for u, i, r, t in
             df[["user_id", "movie_id", "rating", "timestamp"]].itertuples(index=False))
    return "".join(lines).encode()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dest", default=str(Path(__file__).resolve().parents[1] / "data" / "ml-100k"))
    args = ap.parse_args()
    dest = Path(args.dest) / "u.data"
    try:
        data = from_grouplens()
        source = "grouplens"
    except OSError as exc:
        print(f"grouplens unavailable ({exc}); using the pytorch-widedeep copy", file=sys.stderr)
        data = from_wheel()
        source = "pytorch-widedeep wheel"
    digest = hashlib.md5(data).hexdigest()
    if digest != MD5:
        sys.exit(f"checksum mismatch: got {digest}, expected {MD5}")
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_bytes(data)
    print(f"wrote {dest} ({len(data)} bytes, from {source})")


if __name__ == "__main__":
    main()
