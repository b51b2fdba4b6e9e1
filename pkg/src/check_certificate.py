"""
check_certificate.py

Standalone exact validator for certificate files. Uses only polynomial
arithmetic and rational PSD tests; never calls the solver.

Usage:
    python src/check_certificate.py data/results/z3_r28.json [more.json ...]
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import List

from certify import load_certificate, verify_certificate
from cli_utils import fail, ok
from polyalg import to_text


def check(path: Path) -> bool:
    cert = load_certificate(path)
    verification = verify_certificate(cert)
    bound = cert.original_bound
    bound_text = to_text(bound) if hasattr(bound, "varset") else str(bound)
    if verification.ok:
        print(ok(f"{path}: {cert.name} ({cert.sense} bound {bound_text}) verified"))
        for label, r in verification.psd.items():
            kind = "positive definite" if r.nonsingular else "positive semidefinite"
            print(f"  block {label}: {len(cert.gram[label])}x{len(cert.gram[label])}, {kind}")
        return True
    print(fail(f"{path}: {cert.name} rejected: {verification.reason}"), file=sys.stderr)
    return False


def main(argv: List[str] | None = None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print("Usage: python src/check_certificate.py <certificate.json> [...]")
        sys.exit(1)

    passed = 0
    for name in argv:
        try:
            passed += check(Path(name))
        except (FileNotFoundError, ValueError, KeyError) as e:
            print(fail(f"{name}: {e}"), file=sys.stderr)

    print(f"\n{passed}/{len(argv)} certificate(s) verified.")
    if passed != len(argv):
        sys.exit(1)


if __name__ == "__main__":
    main()
