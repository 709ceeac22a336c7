//! Portable trigonometry for the generator.
//!
//! `libm` implementations may differ across platforms by an ulp or two,
//! which would move rasterized boundaries. These use only IEEE-exact
//! arithmetic (+, -, *, /) after range reduction, so the same seed renders
//! the same bytes everywhere.

const PI: f64 = std::f64::consts::PI;
const TAU: f64 = std::f64::consts::TAU;

/// sin via odd Taylor series on [-pi/2, pi/2]; max error ~1e-15 there.
fn sin_reduced(x: f64) -> f64 {
    let x2 = x * x;
    // 1/3!, 1/5!, ... alternating, Horner form.
    let mut acc = -1.0 / 355_687_428_096_000.0; // 1/17!
    acc = acc * x2 + 1.0 / 1_307_674_368_000.0; // 1/15!
    acc = acc * x2 - 1.0 / 6_227_020_800.0; // 1/13!
    acc = acc * x2 + 1.0 / 39_916_800.0; // 1/11!
    acc = acc * x2 - 1.0 / 362_880.0; // 1/9!
    acc = acc * x2 + 1.0 / 5_040.0; // 1/7!
    acc = acc * x2 - 1.0 / 120.0; // 1/5!
    acc = acc * x2 + 1.0 / 6.0; // 1/3!
    x * (1.0 - x2 * acc)
}

pub fn sin_det(x: f64) -> f64 {
    // Reduce to (-pi, pi], then fold onto [-pi/2, pi/2].
    let mut r = x - TAU * (x / TAU).round();
    if r > PI / 2.0 {
        r = PI - r;
    } else if r < -PI / 2.0 {
        r = -PI - r;
    }
    sin_reduced(r)
}

pub fn cos_det(x: f64) -> f64 {
    sin_det(x + PI / 2.0)
}

/// atan on [0, tan(pi/8)] via Taylor; inputs are pre-reduced.
fn atan_small(t: f64) -> f64 {
    // atan(t) = t * (1 + t^2 * P(t^2)), P coefficients (-1)^(m+1)/(2m+3).
    let t2 = t * t;
    let mut acc = -1.0 / 19.0;
    for k in (1..=8).rev() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc = acc * t2 + sign / (2.0 * k as f64 + 1.0);
    }
    t * (1.0 + t2 * acc)
}

fn atan_pos(t: f64) -> f64 {
    const TAN_PI_8: f64 = 0.41421356237309503; // tan(pi/8) = sqrt(2) - 1
    if t <= TAN_PI_8 {
        atan_small(t)
    } else if t <= 1.0 / TAN_PI_8 {
        PI / 4.0 + atan_small((t - 1.0) / (t + 1.0))
    } else {
        PI / 2.0 - atan_small(1.0 / t)
    }
}

pub fn atan2_det(y: f64, x: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        return 0.0;
    }
    let t = y.abs() / x.abs().max(f64::MIN_POSITIVE);
    let base = if x >= 0.0 {
        atan_pos(t)
    } else {
        PI - atan_pos(t)
    };
    if y >= 0.0 {
        base
    } else {
        -base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_cos_match_libm_closely() {
        for i in -1000..1000 {
            let x = i as f64 * 0.0137;
            assert!((sin_det(x) - x.sin()).abs() < 1e-12, "sin({x})");
            assert!((cos_det(x) - x.cos()).abs() < 1e-12, "cos({x})");
        }
    }

    #[test]
    fn atan2_matches_libm_closely() {
        for i in -20..20 {
            for j in -20..20 {
                if i == 0 && j == 0 {
                    continue;
                }
                let (y, x) = (i as f64 * 0.31, j as f64 * 0.17);
                assert!(
                    (atan2_det(y, x) - y.atan2(x)).abs() < 1e-9,
                    "atan2({y}, {x})"
                );
            }
        }
    }
}
