"""Relative bias and RMSE for transfer5 at dt=0.001 over N in {20, 50, 100}."""
from _run import parser, run

if __name__ == "__main__":
    args = parser(__doc__, replicates=100).parse_args()
    run(args, "transfer5", (20, 50, 100), (0.001,), "table2")
