"""Train a small root-4 NiN on a synthetic two-class problem and checkpoint it.

Run: python demos/train_tiny_root.py [output_dir]
"""
import sys

from rootconv import make_nin
from rootconv.data import make_synthetic
from rootconv.trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train


def main(out="demo_checkpoint"):
    net = make_nin("root-4", width=0.125, num_classes=2, input_size=16, in_channels=3)
    data = make_synthetic("separable-2class", seed=0, n=200, channels=3, size=16)
    held_out = make_synthetic("separable-2class", seed=1, n=100, channels=3, size=16)
    cfg = TrainConfig(lr_schedule=[(0, 0.05), (6, 0.01)], batch_size=20, epochs=8, seed=0, mirror=True)
    state, _ = train(net, data, cfg, eval_data=held_out,
                     on_epoch=lambda m: print(f"epoch {m.epoch}  loss {m.loss:.4f}  train {m.train_acc:.3f}  "
                                              f"held-out {m.eval_acc:.3f}"))
    path = save_checkpoint(state, out)
    again = load_checkpoint(path)
    print(f"checkpoint at {path}; reloaded accuracy {evaluate(again, held_out):.3f}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
