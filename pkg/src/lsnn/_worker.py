"""Training worker for parallel experiment runs.

Imported fresh in spawned processes, so the thread cap below takes
effect before the BLAS library loads.  One worker, one BLAS thread:
two single-threaded trainings on two cores beat one two-threaded
training, and the results stay bitwise independent of scheduling.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .models import build_model, checkpoint_digest, save_checkpoint  # noqa: E402
from .train import TrainConfig, train_model  # noqa: E402


def train_job(payload):
    """Generate-free training job: data arrives as arrays, the trained
    model leaves as a checkpoint file plus summary numbers."""
    task = payload["task"]
    kind = payload["kind"]
    groups = 3 if task == "sequence" else 1
    fc_width = 512 if task == "sequence" else 256
    model = build_model(kind, seed=payload["seed"],
                        input_shape=payload["x"].shape[1:],
                        groups=groups, fc_width=fc_width,
                        group_mu_init=payload.get("group_mu_init"))
    cfg = TrainConfig(epochs=payload["epochs"], batch_size=payload["batch_size"],
                      base_lr=payload["base_lr"], momentum=payload["momentum"],
                      seed=payload["seed"], eval_every=payload.get("eval_every", 1))
    records = train_model(model, (payload["x"], payload["y"]),
                          (payload["xe"], payload["ye"]), cfg)
    result = {"task": task, "kind": kind, "records": records,
              "final_error": [r for r in records if r["split"] == "eval"][-1]["error"]}
    out_path = payload.get("out_path")
    if out_path:
        save_checkpoint(out_path, model, extra={"task": task})
        result["checkpoint"] = out_path
        result["checkpoint_sha256"] = checkpoint_digest(out_path)
    return result
