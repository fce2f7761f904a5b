#!/usr/bin/env python3
"""Builds a Text8-style corpus (a-z and space only) from English prose found
in Python docstrings.

Paragraphs containing code-like characters or fewer than eight words are
dropped, duplicates are removed, and the text is lowercased with every run of
non-letters collapsed to one space. The result depends on the Python
installation that is scanned; record the roots used alongside the corpus.

    python3 tools/make_prose_corpus.py data/prose_corpus.txt
"""

import argparse
import ast
import os
import re
import sys
import sysconfig

CODE_CHARS = re.compile(r"[=(){}\[\]>_:`]")
NON_LETTERS = re.compile(r"[^a-z]+")


def docstring_paragraphs(path):
    try:
        with open(path, encoding="utf-8") as f:
            tree = ast.parse(f.read())
    except (SyntaxError, UnicodeDecodeError, ValueError, OSError):
        return
    for node in ast.walk(tree):
        if not isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            continue
        doc = ast.get_docstring(node)
        if not doc:
            continue
        for para in doc.split("\n\n"):
            if CODE_CHARS.search(para):
                continue
            words = para.split()
            if len(words) >= 8:
                yield " ".join(words)


def python_files(root):
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name.endswith(".py"):
                yield os.path.join(dirpath, name)


def main():
    paths = sysconfig.get_paths()
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("output", help="corpus file to write")
    parser.add_argument("--root", action="append", dest="roots",
                        help="directory to scan (repeatable); defaults to the stdlib and site-packages")
    args = parser.parse_args()
    roots = args.roots or [paths["stdlib"], paths["purelib"]]

    seen = set()
    kept = []
    for root in roots:
        for path in python_files(root):
            for para in docstring_paragraphs(path):
                if para not in seen:
                    seen.add(para)
                    kept.append(para)
    text = NON_LETTERS.sub(" ", " ".join(kept).lower())
    os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
    with open(args.output, "w") as f:
        f.write(text)
    print(f"{len(kept)} paragraphs, {len(text)} bytes from {', '.join(roots)}", file=sys.stderr)


if __name__ == "__main__":
    main()
