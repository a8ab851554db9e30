"""Print a 2-D synthetic set as CSV: x, y, sampled label, teacher class and
the teacher's probability for the sampled label.

    python scripts/export_samples.py runs/two_moons/synth.csyn runs/two_moons/teacher.ckpt
"""

import argparse

import numpy as np

from cake.data import load_checkpoint, load_synth
from cake.losses import softened_softmax
from cake.training import predict_logits


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("synth")
    p.add_argument("teacher")
    args = p.parse_args()
    d, net = load_synth(args.synth), load_checkpoint(args.teacher)
    if d.input_shape != (2,):
        p.error(f"expected 2-D samples, got shape {d.input_shape}")
    z = predict_logits(net, d.samples)
    prob = softened_softmax(z).data
    print("x,y,label,teacher_class,teacher_conf")
    for (x, y), lab, cls, pr in zip(d.samples, d.labels, z.argmax(axis=1), prob):
        print(f"{x:.6f},{y:.6f},{lab},{cls},{pr[lab]:.6f}")


if __name__ == "__main__":
    main()
