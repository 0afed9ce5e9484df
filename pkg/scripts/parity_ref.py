"""Capture forward/backward reference values before the fused-op rewrite."""
import json
import sys

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from versadepth import depth_math, model
from versadepth.depth_math import DepthMap
from versadepth.rng import Rng
from versadepth.tensor import Tensor


def main():
    rng = np.random.default_rng(7)
    m = model.VdeModel(model.micro_config(), Rng(0))
    m.add_camera("cam0", Rng(0).split("r2mc.cam0"))
    m.astype(np.float64)

    x = Tensor(rng.normal(size=(2, 3, 32, 32)))
    mhat, n_hat = m.forward(x, camera="cam0")

    gt = np.abs(rng.normal(size=(2, 32, 32))) + 0.5
    valid = np.ones((2, 32, 32), dtype=bool)
    valid[0, :4] = False

    loss = depth_math.silog_loss(mhat, DepthMap(gt, valid)) + 0.1 * n_hat.mean()
    loss.backward()
    gsum = 0.0
    for name, p in m.named_parameters():
        if p.grad is not None:
            gsum += float(np.abs(p.grad).sum())

    out = {
        "n_hat_sum": float(n_hat.data.sum()),
        "n_hat_corner": n_hat.data[0, :2, :2].ravel().tolist(),
        "mhat_sum": float(mhat.data.sum()),
        "mhat_corner": mhat.data[1, :2, :2].ravel().tolist(),
        "loss": float(loss.data),
        "grad_abs_sum": gsum,
        "param_count": m.count_params()["total"],
    }
    print(json.dumps(out, indent=1))
    with open("/root/pkg/scripts/parity_ref.json", "w") as f:
        json.dump(out, f)


if __name__ == "__main__":
    main()
