//! Matrix exponential via Padé approximants with scaling and squaring
//! (Higham 2005), plus its Fréchet derivative through the block-matrix
//! identity, which the trainer's backward pass relies on.

use super::{fro_norm, Matrix, NumericsError, Result};

// Order thresholds θ_m for the 1-norm of the (scaled) input.
const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539_398_330_063_23e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const B9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

fn one_norm(a: &Matrix) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Build U and V for orders 3..9 from precomputed even powers of A.
fn pade_low(a: &Matrix, powers: &[Matrix], b: &[f64]) -> (Matrix, Matrix) {
    let n = a.nrows();
    let id = Matrix::identity(n, n);
    let mut u_inner = &id * b[1];
    let mut v = &id * b[0];
    for (k, p) in powers.iter().enumerate() {
        // powers[k] = A^{2(k+1)}
        u_inner += p * b[2 * (k + 1) + 1];
        v += p * b[2 * (k + 1)];
    }
    (a * u_inner, v)
}

fn pade_13(a: &Matrix) -> (Matrix, Matrix) {
    let n = a.nrows();
    let id = Matrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &B13;
    let u_high = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u_low = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = a * (u_high + u_low);
    let v_high = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_high + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

/// e^A by scaling-and-squaring with Padé approximants.
pub fn matrix_exp(a: &Matrix) -> Result<Matrix> {
    if a.nrows() != a.ncols() {
        return Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("matrix_exp input"));
    }
    let norm = one_norm(a);
    let (u, v, squarings): (Matrix, Matrix, u32) = if norm <= THETA_3 {
        let a2 = a * a;
        let (u, v) = pade_low(a, &[a2], &B3);
        (u, v, 0)
    } else if norm <= THETA_5 {
        let a2 = a * a;
        let a4 = &a2 * &a2;
        let (u, v) = pade_low(a, &[a2, a4], &B5);
        (u, v, 0)
    } else if norm <= THETA_7 || norm <= THETA_9 {
        let a2 = a * a;
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        if norm <= THETA_7 {
            let (u, v) = pade_low(a, &[a2, a4, a6], &B7);
            (u, v, 0)
        } else {
            let a8 = &a6 * &a2;
            let (u, v) = pade_low(a, &[a2, a4, a6, a8], &B9);
            (u, v, 0)
        }
    } else {
        let s = ((norm / THETA_13).log2().ceil()).max(0.0);
        if s > 1022.0 {
            return Err(NumericsError::NonFinite("matrix_exp: norm too large"));
        }
        let scaled = a * 2f64.powi(-(s as i32));
        let (u, v) = pade_13(&scaled);
        (u, v, s as u32)
    };
    let numer = &v + &u;
    let denom = v - u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or(NumericsError::SolveFailed("Padé denominator is singular"))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("matrix_exp result"));
    }
    Ok(r)
}

/// e^A together with the Fréchet derivative L(A, E) (the directional
/// derivative of the exponential at A along E), via
/// exp([[A, E], [0, A]]) = [[e^A, L(A,E)], [0, e^A]].
///
/// E is normalized before the block exponential so a large-magnitude
/// direction cannot force extra squarings and lose accuracy.
pub fn matrix_exp_frechet(a: &Matrix, e: &Matrix) -> Result<(Matrix, Matrix)> {
    let n = a.nrows();
    if a.nrows() != a.ncols() {
        return Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if e.shape() != a.shape() {
        return Err(NumericsError::DimensionMismatch(format!(
            "direction shape {:?} does not match matrix shape {:?}",
            e.shape(),
            a.shape()
        )));
    }
    let scale = fro_norm(e);
    if scale == 0.0 {
        return Ok((matrix_exp(a)?, Matrix::zeros(n, n)));
    }
    let e_unit = e / scale;
    let mut block = Matrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, n)).copy_from(&e_unit);
    block.view_mut((n, n), (n, n)).copy_from(a);
    let big = matrix_exp(&block)?;
    let expa = big.view((0, 0), (n, n)).into_owned();
    let frechet = big.view((0, n), (n, n)).into_owned() * scale;
    Ok((expa, frechet))
}
