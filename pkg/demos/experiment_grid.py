"""Run the shipped example config through the library, as `cellwise compare` does."""

from pathlib import Path

from cellwise import load_config, run_experiment
from cellwise.experiment import render_markdown

config = Path(__file__).resolve().parents[1] / "docs" / "example_config.yaml"
result = run_experiment(load_config(config))
print(render_markdown(result.soc_table))
print(render_markdown(result.v_table))
print(f"{result.n_cells - len(result.errors)}/{result.n_cells} cells ok")
