"""Sin loss against MSE loss under the same desk budget and seed."""

import numpy as np
from threadpoolctl import threadpool_limits

from hsurf import desk


def main():
    rows = []
    with threadpool_limits(1):
        for loss in ("sin", "mse"):
            state, seconds = desk.train_desk(loss)
            rep = desk.bench_desk(state.params, methods=(), name=f"hsurf[{loss}]")
            for (m, c), e in rep.entries.items():
                rows.append((m, c, e.rmse))
            print(f"{loss}: trained in {seconds / 60:.1f} min", flush=True)
    for m, c, r in rows:
        print(f"{m:<12s} {c:<12s} {r:8.4f}")
    for loss in ("sin", "mse"):
        print(f"mean RMSE {loss}: {np.mean([r for m, _, r in rows if m == f'hsurf[{loss}]']):.4f}")


if __name__ == "__main__":
    main()
