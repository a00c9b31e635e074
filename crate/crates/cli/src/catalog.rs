//! Static listing of every catalog key accepted in configs.

const ENTRIES: &[(&str, &[(&str, &str)])] = &[
    (
        "lagrangians",
        &[
            ("kinetic", "|v|^2 / 2"),
            ("harmonic(k)", "|v|^2 - k |x|^2"),
            ("kinetic-potential(c)", "|v|^2 / 2 + c |x|^2"),
            ("free-square", "|v|^2"),
            ("momentum-free", "t |v|^2"),
            ("momentum-free(c,p,q)", "c t^p sum_i v_i^q; p, q non-negative integers"),
            ("pendulum(w2)", "v^2 / 2 + w2 cos x; d = 1"),
            ("relativistic(m)", "-m sqrt(1 - |v|^2); not polynomial in v"),
        ],
    ),
    (
        "generators",
        &[
            ("identity", "T = 0, X = 0"),
            ("translation-t", "T = 1, X = 0 (energy)"),
            ("translation-x", "T = 0, X = (1, ..., 1) (momentum)"),
            ("translation-x(e_1,...,e_d)", "T = 0, X = e"),
            ("scaling", "T = 2t, X = x"),
            ("scaling(c,b1,b2)", "T = 2ct + b2, X = cx + b1"),
            ("rotation-2d", "T = 0, X = (-x2, x1); d = 2"),
        ],
    ),
    (
        "groups",
        &[
            ("translation", "x + s (1, ..., 1)"),
            ("translation(e_1,...,e_d)", "x + s e"),
            ("rotation-2d", "planar rotation by s; d = 2"),
            ("dilation", "e^s x"),
        ],
    ),
    (
        "sde",
        &[
            ("brownian", "b = 0, sigma = 1"),
            ("constant(b,s)", "b constant, sigma = s"),
            ("ou", "b = -x, sigma = sqrt(2)"),
            ("ou(th,s)", "b = -th x, sigma = s"),
            ("deterministic(b)", "b constant, sigma = 0"),
            ("linear(c0,c1,th,s)", "b = c0 + c1 t - th x, sigma = s"),
        ],
    ),
    (
        "variations",
        &[
            ("zero", "Z = 0"),
            ("sine", "sin(pi (t - a) / (b - a)) e"),
            ("bump", "exp(1 - 1 / (1 - r^2)) e, r = (2t - a - b) / (b - a)"),
            ("ramp", "(t - a) / (b - a) e"),
            ("constant", "e"),
        ],
    ),
    (
        "kinds",
        &[
            ("extremal", "lagrangian, boundary, numeric.N"),
            ("noether-check", "lagrangian, generators, boundary, numeric.N"),
            ("simulate", "sde, numeric.{n_paths, dt, seed}"),
            ("nelson-estimate", "sde, numeric.{n_paths, dt, seed, times}"),
            ("stochastic-noether", "lagrangian, group, sde, numeric.{n_paths, dt, seed}"),
            ("differential-check", "lagrangian, sde, numeric.{n_paths, dt, seed}"),
        ],
    ),
];

pub fn listing() -> String {
    let mut out = String::new();
    for (section, keys) in ENTRIES {
        out.push_str(section);
        out.push_str(":\n");
        for (key, doc) in keys.iter() {
            out.push_str(&format!("  {key:<28} {doc}\n"));
        }
    }
    out
}
