"""Train the IndRNN-LSTM forecaster on a noisy sine and compare it with
the persistence baseline.

    python demos/forecast_sine.py [--seed 0] [--epochs 100]
"""

import argparse

from flowcast.dataio import apply_normalizer, fit_normalizer, make_windows, train_sample_count
from flowcast.detect import evaluate, persistence_baseline
from flowcast.nn import init_network
from flowcast.synthetic import sine_matrix
from flowcast.train import TrainConfig, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=100)
    args = parser.parse_args()

    window = 10
    matrix = sine_matrix(n_steps=2000, seed=args.seed)
    n_train = train_sample_count(matrix.shape[0] - window, 0.8)

    # fit the scaler only on rows the training windows can see
    params = fit_normalizer(matrix.rows(0, n_train + window))
    dataset = make_windows(apply_normalizer(matrix, params), window)
    train_set, test_set = dataset.subset(0, n_train), dataset.subset(n_train)

    net = init_network({"n_features": 1, "indrnn_widths": [64, 64], "lstm_width": 64,
                        "window_length": window, "seed": args.seed})

    def log(epoch, train_loss, val_loss):
        if epoch % 10 == 0 or epoch == 1:
            print(f"epoch {epoch:4d}  train {train_loss:.2e}  val {val_loss:.2e}")

    train(net, train_set, TrainConfig(epochs=args.epochs, seed=args.seed), log=log)

    hybrid = evaluate(net, test_set)
    baseline = persistence_baseline(test_set)
    print(f"hybrid       MAE {hybrid.mae:.4f}  RMSE {hybrid.rmse:.4f}")
    print(f"persistence  MAE {baseline.mae:.4f}  RMSE {baseline.rmse:.4f}")
    print(f"ratio {hybrid.mae / baseline.mae:.3f}")


if __name__ == "__main__":
    main()
