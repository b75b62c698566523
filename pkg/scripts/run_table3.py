"""Relative bias and RMSE for the stochastic FitzHugh-Nagumo model at N=50 over dt in {0.001, 0.01, 0.1}.

Parameters are reported on both scales: mu = (1/eps, s/eps, gamma, eta) and (eps, s).
Pass --scheme ito to use the higher-order statistics instead of the left-point sums.
"""
from _run import parser, run

if __name__ == "__main__":
    args = parser(__doc__, replicates=100).parse_args()
    run(args, "fhn", (50,), (0.001, 0.01, 0.1), "table3" + ("_ito" if args.scheme == "ito" else ""))
