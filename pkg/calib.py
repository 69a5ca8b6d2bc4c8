"""Scratch calibration sweep for the trend configuration (not shipped)."""
import itertools
import time
from dataclasses import replace

from daczsl import *
from daczsl.model import ModelConfig
from daczsl.trainer import AblationFlags, TrainConfig, run_sequence
from daczsl import metrics as mx

ROWS = {
    "a1": dict(use_local=False, use_domain_disc=False, use_task_disc=False, use_disen=False),
    "a2": dict(use_local=True, use_domain_disc=False, use_task_disc=False, use_disen=False),
    "a3": dict(use_local=False, use_domain_disc=True, use_task_disc=True, use_disen=False),
    "a4": dict(use_local=True, use_domain_disc=True, use_task_disc=True, use_disen=False),
    "a5": dict(use_local=True, use_domain_disc=False, use_task_disc=False, use_disen=True),
    "a6": dict(use_local=True, use_domain_disc=True, use_task_disc=True, use_disen=True),
    "b": dict(use_local=True, use_domain_disc=True, use_task_disc=True, use_disen=True, use_buffer=False),
}


def run_grid(shift, lam2, epochs, lr, seeds=(0, 1, 2), sep=3.0, corr=0.9, k=8, n_d=1,
             lr_disc=1e-3, lam1=0.1):
    mc = ModelConfig(embed_dim=16, hidden_dim=64, disc_hidden=128)
    means = {}
    t0 = time.time()
    for label, kw in ROWS.items():
        ls, bwt, mh = [], [], []
        for seed in seeds:
            cfg = SplitConfig(mode="U_DACZSL", num_domains=4, num_classes=12,
                              num_tasks=3, target_domain=3, seed=seed,
                              feature_dim=32, semantic_dim=16, examples_per_pair=30,
                              domain_shift_strength=shift, class_separation=sep,
                              semantic_correlation=corr)
            stream = build_task_stream(generate_corpus(cfg), cfg)
            tc = TrainConfig.desk(main_epochs=epochs, warmup_epochs=2, k_shot=k,
                                  batch_size=64, lr_encoders=lr, disc_steps=n_d,
                                  lr_disc=lr_disc)
            w = LossWeights(lambda1=lam1, lambda2=lam2)
            res = run_sequence(stream, mc, tc, w, AblationFlags(**kw), seed=seed)
            R = res.matrix
            ls.append(mx.last_seen(R))
            bwt.append(mx.backward_transfer(R))
            mh.append(mx.harmonic(mx.mean_seen(R), mx.mean_unseen(R)))
        means[label] = (sum(ls) / len(ls), sum(bwt) / len(bwt), sum(mh) / len(mh))
    elapsed = time.time() - t0
    i = means["a2"][0] > means["a1"][0]
    ii = means["a3"][0] < means["a1"][0] and means["a3"][1] < 0
    iii = all(means["a6"][0] >= means[r][0] for r in ("a1", "a2", "a3", "a4", "a5"))
    iv = means["a6"][0] > means["b"][0]
    print(f"shift={shift} lam2={lam2} ep={epochs} lr={lr} nd={n_d} lrd={lr_disc} "
          f"lam1={lam1} | i={int(i)} ii={int(ii)} iii={int(iii)} iv={int(iv)} "
          f"({elapsed:.0f}s)")
    for label in ROWS:
        print(f"   {label}: LS={means[label][0]:.3f} BWT={means[label][1]:+.3f} mH={means[label][2]:.3f}")
    return i and ii and iii and iv


if __name__ == "__main__":
    import sys
    args = sys.argv[1:]
    if args:
        shift, lam2, ep, lr = float(args[0]), float(args[1]), int(args[2]), float(args[3])
        run_grid(shift, lam2, ep, lr)
    else:
        for shift, lam2 in itertools.product([1.0, 1.5], [0.05, 0.1]):
            run_grid(shift, lam2, 20, 3e-3, seeds=(0,))
