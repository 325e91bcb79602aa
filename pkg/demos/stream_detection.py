"""End-to-end run on generated NSL-KDD-layout flow records with one planted
traffic spike, then replay the file through the streaming detector.

    python demos/stream_detection.py [--workdir /tmp/flowcast-demo]
"""

import argparse
import io
import json
import tempfile
from pathlib import Path

from flowcast import cli
from flowcast.synthetic import write_flow_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=None)
    parser.add_argument("--epochs", type=int, default=30)
    args = parser.parse_args()

    work = Path(args.workdir or tempfile.mkdtemp(prefix="flowcast-"))
    work.mkdir(parents=True, exist_ok=True)
    spike = 520
    data = write_flow_csv(work / "flows.csv", n_rows=600, seed=0, spike_at=spike)
    out = work / "run"

    for argv in (["prep", "--data", data, "--columns", "nsl-kdd", "--epochs", args.epochs],
                 ["select", "--method", "filter", "--k", "6"],
                 ["train"],
                 ["eval"]):
        code = cli.main([argv[0], "--out", str(out), "--overwrite", *map(str, argv[1:])])
        if code:
            raise SystemExit(code)

    run = cli.RunDir(out)
    cfg = cli.RunConfig.from_dict(run.read_json("config.json")).resolved()
    sink, summary_sink = io.StringIO(), io.StringIO()
    with data.open(newline="") as fh:
        summary = cli.cmd_detect(cfg, run, fh, out=sink, err=summary_sink)

    verdicts = [json.loads(line) for line in sink.getvalue().splitlines()]
    flagged = [v["step"] for v in verdicts if v.get("is_anomaly")]
    print(f"artifacts in {out}")
    print(f"flagged steps: {flagged}")
    print(f"planted spike at {spike}: {'flagged' if spike in flagged else 'missed'}")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
