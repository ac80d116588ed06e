#!/usr/bin/env python3
# Copyright (c) 2026 The wmlab Authors
# SPDX-License-Identifier: Apache-2.0
"""Writes the two sample corpora under data/.

broad.txt: prose excerpts from U.S. State of the Union addresses (1790-2016).
           These are works of the U.S. Government and in the public domain.
           The source is the `@stdlib/datasets-sotu` npm package, whose data
           files are released under PDDL-1.0 / CC0:

               npm pack @stdlib/datasets-sotu && tar xzf stdlib-datasets-sotu-*.tgz
               python3 tools/make_corpora.py --sotu package/data

math.txt:  arithmetic question/answer documents marked with "<Q>" and "<A>",
           generated from templates.

Documents are separated by a blank line. Output is fully determined by the
inputs and --seed.
"""

import argparse
import pathlib
import random
import re
import unicodedata

ASCII_FOLD = {"\u2018": "'", "\u2019": "'", "\u201c": '"', "\u201d": '"', "\u2013": "-", "\u2014": "--",
              "\u2026": "...", "\u00a0": " "}
SENTENCE_END = re.compile(r"(?<=[.!?])\s+(?=[A-Z\"'(])")


def fold(text):
    for k, v in ASCII_FOLD.items():
        text = text.replace(k, v)
    text = unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode("ascii")
    return re.sub(r"\s+", " ", text).strip()


def address_docs(path, rng, min_sentences=5, max_sentences=10):
    """Splits one address into consecutive runs of sentences."""
    sentences = [s for s in SENTENCE_END.split(fold(path.read_text(encoding="utf-8"))) if s]
    docs, i = [], 0
    while i < len(sentences):
        n = rng.randint(min_sentences, max_sentences)
        chunk = " ".join(sentences[i:i + n])
        if len(chunk) >= 300:
            docs.append(chunk)
        i += n
    return docs


def broad_corpus(sotu_dir, rng, n_docs):
    files = sorted(pathlib.Path(sotu_dir).glob("*.txt"))
    if not files:
        raise SystemExit(f"no address files (*.txt) under {sotu_dir}")
    pool = [d for f in files for d in address_docs(f, rng)]
    keep = sorted(rng.sample(range(len(pool)), min(n_docs, len(pool))))
    return [pool[i] for i in keep]


def qa_pair(rng):
    kind = rng.choice(["add", "sub", "mul", "word_add", "word_mul", "compare"])
    a, b = rng.randint(2, 99), rng.randint(2, 99)
    if kind == "add":
        return f"<Q> What is {a} + {b}? <A> {a} + {b} = {a + b}."
    if kind == "sub":
        a, b = max(a, b), min(a, b)
        return f"<Q> What is {a} - {b}? <A> {a} - {b} = {a - b}."
    if kind == "mul":
        a, b = rng.randint(2, 19), rng.randint(2, 19)
        return f"<Q> What is {a} * {b}? <A> {a} * {b} = {a * b}."
    if kind == "word_add":
        item = rng.choice(["apples", "books", "coins", "stones", "eggs", "pens"])
        return (f"<Q> Sam has {a} {item} and finds {b} more. How many {item} does Sam have? "
                f"<A> {a} + {b} = {a + b}. Sam has {a + b} {item}.")
    if kind == "word_mul":
        a, b = rng.randint(2, 12), rng.randint(2, 12)
        item = rng.choice(["boxes", "bags", "rows", "shelves"])
        return (f"<Q> There are {a} {item} with {b} items each. How many items are there? "
                f"<A> {a} * {b} = {a * b}. There are {a * b} items.")
    bigger = max(a, b)
    return f"<Q> Which is larger, {a} or {b}? <A> The larger number is {bigger}."


def math_doc(rng):
    return " ".join(qa_pair(rng) for _ in range(rng.randint(5, 10)))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--sotu", required=True, help="directory with the address .txt files")
    ap.add_argument("--seed", type=int, default=20260101)
    ap.add_argument("--broad-docs", type=int, default=1200)
    ap.add_argument("--math-docs", type=int, default=1200)
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    broad = broad_corpus(args.sotu, rng, args.broad_docs)
    rng = random.Random(args.seed + 1)
    math = [math_doc(rng) for _ in range(args.math_docs)]
    (out / "broad.txt").write_text("\n\n".join(broad) + "\n", encoding="utf-8")
    (out / "math.txt").write_text("\n\n".join(math) + "\n", encoding="utf-8")
    for name, docs in (("broad", broad), ("math", math)):
        size = sum(len(d) for d in docs)
        print(f"{name}: {len(docs)} documents, {size} bytes")


if __name__ == "__main__":
    main()
