"""Relative bias and RMSE for transfer5 at N=50 over dt in {0.001, 0.01, 0.1}."""
from _run import parser, run

if __name__ == "__main__":
    args = parser(__doc__, replicates=100).parse_args()
    run(args, "transfer5", (50,), (0.001, 0.01, 0.1), "table1")
