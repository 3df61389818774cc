"""End-to-end desk reproduction with the ordinal checks.

Pass --fast for a smoke run of a few seconds. The full run takes roughly
a quarter of an hour on one core and writes its artefacts to the output
directory, with a manifest that is byte-identical across reruns.
"""
import argparse

from vqcpc.pipeline import PipelineConfig, fast_config, format_checks, run_repro

parser = argparse.ArgumentParser()
parser.add_argument("--fast", action="store_true")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="/tmp/vqcpc_demo_repro")
args = parser.parse_args()

cfg = fast_config(args.seed) if args.fast else PipelineConfig().seeded(args.seed)
result = run_repro(cfg, args.out, log=lambda m: print(m, flush=True))
print()
print(format_checks(result["checks"]))
print("timings:", {k: round(v, 1) for k, v in result["timings"].items()})
