"""Regenerate the shipped synthetic fixture under data/."""

from pathlib import Path

from oneshot_fgl.bundle_io import save_bundle
from oneshot_fgl.synthetic import make_csbm

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    bundle = make_csbm([24, 20, 16], feature_dim=8, avg_degree=5.0, homophily=0.8,
                       feature_signal=1.5, fractions=(0.5, 0.2, 0.3), seed=60,
                       name="synthetic60")
    save_bundle(bundle, ROOT / "data" / "synthetic60")
    print(f"synthetic60: {bundle.num_nodes} nodes, {bundle.graph.num_edges} edges")
