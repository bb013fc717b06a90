"""Compile the test fixtures.

    python tests/fixtures/build.py OUTDIR            # minienc variants
    python tests/fixtures/build.py OUTDIR --bzip2    # also bzip2 at O0..O3

Compilation runs from the project directory with relative source paths, so the
line table records ``src/...`` names under the compilation directory.
"""

import argparse
import glob
import os
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor

HERE = os.path.dirname(os.path.abspath(__file__))
MINIENC = os.path.join(HERE, "minienc")
BZIP2 = os.path.join(os.path.dirname(HERE), "realworld", "bzip2-1.0.8")
BZIP2_SOURCES = ["blocksort.c", "huffman.c", "crctable.c", "randtable.c", "compress.c",
                 "decompress.c", "bzlib.c", "bzip2.c"]

# name -> (compiler, flags)
MINIENC_VARIANTS = {
    "basenc_O0": ("gcc", ["-g", "-O0"]),
    "basenc_O1": ("gcc", ["-g", "-O1"]),
    "basenc_O2": ("gcc", ["-g", "-O2"]),
    "basenc_O3": ("gcc", ["-g", "-O3"]),
    "basenc_O2_dwarf4": ("gcc", ["-gdwarf-4", "-O2"]),
    "basenc_O2_noplt": ("gcc", ["-g", "-O2", "-fno-plt"]),
    "basenc_nodebug": ("gcc", ["-O0"]),
    "basenc_clang_O2": ("clang", ["-g", "-O2"]),
}


def _run(cmd, cwd):
    subprocess.run(cmd, cwd=cwd, check=True, capture_output=True)


def build_minienc(out_dir, names=None):
    os.makedirs(out_dir, exist_ok=True)
    sources = sorted(os.path.relpath(p, MINIENC) for p in glob.glob(os.path.join(MINIENC, "src", "*.c")))
    built = {}

    def one(name):
        cc, flags = MINIENC_VARIANTS[name]
        if shutil.which(cc) is None:
            return name, None
        out = os.path.join(out_dir, name)
        _run([cc, *flags, *sources, "-o", out], MINIENC)
        return name, out

    with ThreadPoolExecutor(4) as pool:
        for name, path in pool.map(one, names or list(MINIENC_VARIANTS)):
            if path:
                built[name] = path
    if "basenc_O0" in built:
        stripped = os.path.join(out_dir, "basenc_stripped")
        shutil.copy(built["basenc_O0"], stripped)
        _run(["strip", "--strip-all", stripped], out_dir)
        built["basenc_stripped"] = stripped
    empty_c = os.path.join(out_dir, "empty.c")
    with open(empty_c, "w") as fh:
        fh.write("/* nothing */\n")
    _run(["gcc", "-c", "empty.c", "-o", "empty.o"], out_dir)
    built["empty_object"] = os.path.join(out_dir, "empty.o")
    return built


def build_bzip2(out_dir, levels=("O0", "O1", "O2", "O3"), cc="gcc"):
    os.makedirs(out_dir, exist_ok=True)

    def one(level):
        out = os.path.join(out_dir, f"bzip2_{cc}_{level}")
        _run([cc, "-g", f"-{level}", "-w", "-D_FILE_OFFSET_BITS=64", *BZIP2_SOURCES, "-o", out], BZIP2)
        return level, out

    with ThreadPoolExecutor(len(levels)) as pool:
        return dict(pool.map(one, levels))


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--bzip2", action="store_true")
    args = ap.parse_args()
    for name, path in sorted(build_minienc(args.out_dir).items()):
        print(name, path)
    if args.bzip2:
        for level, path in sorted(build_bzip2(args.out_dir).items()):
            print(level, path)
