"""Print every finite-difference check with its relative error."""

from hsurf.gradcheck import THRESHOLD, run_all

if __name__ == "__main__":
    results = run_all()
    for name, err in sorted(results.items(), key=lambda kv: -kv[1]):
        print(f"{name:<32s} {err:.3e}")
    print(f"worst {max(results.values()):.3e}, threshold {THRESHOLD:g}")
