#!/usr/bin/env python3
"""
CLI script for the speaker-set extraction pipeline.

Usage:
    python agn.py synth-corpus --out data/wellknown --speakers 8 --seconds 120
    python agn.py pretrain --corpus data/wellknown/manifest.tsv --config configs/desk.cfg --out runs/pre.ckpt
    python agn.py eval --ckpt runs/pre.ckpt --corpus data/wellknown/manifest.tsv --out runs/eval
"""

from src.cli import run

if __name__ == "__main__":
    run()
