#!/usr/bin/env python3
"""Build the King James Bible text corpus used by the desk-scale LM sweep.

The text comes from the MIT-licensed `bible-kjv` npm package (the KJV itself
is public domain). Markup is stripped: italics and red-letter spans keep their
words, translator footnotes are dropped. Whole chapters are assigned to
splits: of every 20 consecutive chapters, the 19th goes to valid and the
20th to test.

    python3 tools/prepare_kjv_corpus.py --out data/kjv
"""

import argparse
import json
import pathlib
import re
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "bible-kjv@1.1.3"

FOOTNOTE = re.compile(r"<RF>.*?<Rf>", re.S)
TAG = re.compile(r"</?[A-Za-z]+>")


def clean(verse):
    verse = FOOTNOTE.sub("", verse)
    verse = TAG.sub("", verse)
    return " ".join(verse.split())


def fetch(workdir):
    out = subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.strip().splitlines()[-1]
    with tarfile.open(workdir / out) as tar:
        tar.extractall(workdir, filter="data")
    return workdir / "package"


def chapters(package):
    dist = package / "dist"
    books = json.loads((dist / "content" / "books.json").read_text(encoding="utf-8"))
    for b, book in enumerate(books, start=1):
        for c in range(1, book["chapters"] + 1):
            verses = json.loads((dist / "resources" / str(b) / f"{c}.json").read_text(encoding="utf-8"))
            lines = [f"{book['name']} {c}"]
            lines += [f"{c}:{v} {clean(text)}" for v, text in enumerate(verses, start=1)]
            yield "\n".join(lines) + "\n\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/kjv", help="output directory (train.txt, valid.txt, test.txt)")
    ap.add_argument("--package-dir", help="already extracted bible-kjv package; skips npm")
    ap.add_argument("--if-missing", action="store_true", help="do nothing when all three splits exist")
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    if args.if_missing and all((out / f"{n}.txt").exists() for n in ("train", "valid", "test")):
        print(f"{out}: corpus present")
        return 0

    with tempfile.TemporaryDirectory() as tmp:
        package = pathlib.Path(args.package_dir) if args.package_dir else fetch(pathlib.Path(tmp))
        splits = {"train": [], "valid": [], "test": []}
        for i, text in enumerate(chapters(package)):
            name = "valid" if i % 20 == 18 else "test" if i % 20 == 19 else "train"
            splits[name].append(text)

    out.mkdir(parents=True, exist_ok=True)
    for name, parts in splits.items():
        data = "".join(parts)
        (out / f"{name}.txt").write_text(data, encoding="utf-8")
        print(f"{name}: {len(parts)} chapters, {len(data.encode('utf-8'))} bytes, {len(data.split())} words")
    return 0


if __name__ == "__main__":
    sys.exit(main())
