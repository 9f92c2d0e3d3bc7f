"""Small-parameter invocations of every subcommand, shared by the CLI tests."""

SMALL = {
    "simulate": ["--model", "ou-lin", "--eps", "0.1", "--T", "0.2", "--paths", "6", "--save-every", "10"],
    "couple": ["--model", "ou-lin", "--delta", "0.01", "--T", "0.5", "--paths", "8", "--save-every", "50"],
    "ergodic": ["--model", "ou-lin", "--x", "0.5", "--t", "1.0", "--lookback", "2", "--samples", "50"],
    "invariant": ["--model", "double-well", "--x", "0.0", "--burn-in", "2", "--samples", "40", "--thin", "2"],
    "average": ["--model", "periodic-weak", "--x-grid", "lin:-1:1:3", "--samples", "60", "--burn-in", "2"],
    "khasminskii": ["--model", "ou-lin", "--eps", "0.05", "--T", "0.2", "--paths", "6", "--export-every", "10"],
    "strong-converge": ["--model", "ou-lin", "--eps-grid", "0.5,0.25,0.125", "--T", "0.2", "--paths", "20",
                        "--x-grid", "lin:-5:5:11", "--samples", "60", "--burn-in", "2"],
    "weak-converge": ["--model", "periodic-weak", "--eps-grid", "0.5,0.25", "--T", "0.2", "--paths", "40",
                      "--x-grid", "lin:-5:5:11", "--samples", "60", "--burn-in", "2", "--phi", "tanh,sin"],
    "residual": ["--model", "periodic-weak", "--x-grid", "lin:-5:5:11", "--samples", "60", "--burn-in", "2",
                 "--T", "0.2", "--dt", "0.01", "--paths", "30"],
    "increments": ["--model", "ou-lin", "--eps", "0.1", "--T", "0.2", "--h-grid", "0.1,0.05", "--paths", "20"],
    "validate-model": ["--model", "double-well", "--pairs", "500"],
}
