//! Direct 3D convolution, Kronecker kernel construction, and the factorized
//! two-step (2D spatial then 1D temporal) convolution, together with the
//! rank-1 fit diagnostic. The central obligation here is exact equivalence:
//! `conv_factorized(v, fk) == conv3d(v, kron_expand(fk))` under the shared
//! zero same-padding convention.

use rand::Rng;

use crate::error::{FstcnError, Result};
use crate::tensor::{Padding, Tensor};

/// Single-channel video volume `[m_x, m_y, m_t]`.
#[derive(Clone, Debug)]
pub struct VideoVolume {
    pub data: Tensor,
}

impl VideoVolume {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(FstcnError::shape("VideoVolume", "[m_x, m_y, m_t]", format!("{:?}", data.shape())));
        }
        Ok(VideoVolume { data })
    }
}

/// A 3D kernel in factorized form: a 2D spatial kernel and a 1D temporal
/// kernel whose Kronecker product reconstitutes the full kernel.
#[derive(Clone, Debug)]
pub struct FactorizedKernel {
    /// `K_xy`, shape `[n_x, n_y]`.
    pub spatial: Tensor,
    /// `k_t`, shape `[n_t]`.
    pub temporal: Tensor,
}

impl FactorizedKernel {
    pub fn new(spatial: Tensor, temporal: Tensor) -> Result<Self> {
        if spatial.rank() != 2 {
            return Err(FstcnError::shape("FactorizedKernel spatial", "[n_x, n_y]", format!("{:?}", spatial.shape())));
        }
        if temporal.rank() != 1 {
            return Err(FstcnError::shape("FactorizedKernel temporal", "[n_t]", format!("{:?}", temporal.shape())));
        }
        Ok(FactorizedKernel { spatial, temporal })
    }

    pub fn param_count(&self) -> usize {
        self.spatial.len() + self.temporal.len()
    }
}

/// Expand a factorized kernel to the full 3D kernel:
/// `K[i, j, l] = K_xy[i, j] * k_t[l]`.
pub fn kron_expand(fk: &FactorizedKernel) -> Tensor {
    let (nx, ny) = (fk.spatial.shape()[0], fk.spatial.shape()[1]);
    let nt = fk.temporal.shape()[0];
    Tensor::from_fn(&[nx, ny, nt], |idx| {
        fk.spatial.at(&[idx[0], idx[1]]) * fk.temporal.at(&[idx[2]])
    })
}

/// Direct 3D cross-correlation with zero padding, same-extent output under
/// [`Padding::Same`]. Single channel, stride 1.
pub fn conv3d(volume: &VideoVolume, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    if kernel.rank() != 3 {
        return Err(FstcnError::shape("conv3d kernel", "[n_x, n_y, n_t]", format!("{:?}", kernel.shape())));
    }
    let vs = volume.data.shape();
    let ks = kernel.shape();
    let (mx, my, mt) = (vs[0], vs[1], vs[2]);
    let (nx, ny, nt) = (ks[0], ks[1], ks[2]);
    let px = padding.resolve(nx);
    let py = padding.resolve(ny);
    let pt = padding.resolve(nt);
    let ox = checked_extent(mx, nx, px)?;
    let oy = checked_extent(my, ny, py)?;
    let ot = checked_extent(mt, nt, pt)?;
    let mut out = Tensor::zeros(&[ox, oy, ot]);
    for ix in 0..ox {
        for iy in 0..oy {
            for it in 0..ot {
                let mut acc = 0.0;
                for kx in 0..nx {
                    let vx = (ix + kx) as isize - px.0 as isize;
                    if vx < 0 || vx as usize >= mx {
                        continue;
                    }
                    for ky in 0..ny {
                        let vy = (iy + ky) as isize - py.0 as isize;
                        if vy < 0 || vy as usize >= my {
                            continue;
                        }
                        for kt in 0..nt {
                            let vt = (it + kt) as isize - pt.0 as isize;
                            if vt < 0 || vt as usize >= mt {
                                continue;
                            }
                            acc += volume.data.at(&[vx as usize, vy as usize, vt as usize])
                                * kernel.at(&[kx, ky, kt]);
                        }
                    }
                }
                out.set(&[ix, iy, it], acc);
            }
        }
    }
    Ok(out)
}

/// Factorized convolution: convolve every frame with the spatial kernel, then
/// every temporal fiber of the result with the temporal kernel. Padding
/// resolves per axis exactly as in [`conv3d`].
pub fn conv_factorized(volume: &VideoVolume, fk: &FactorizedKernel, padding: Padding) -> Result<Tensor> {
    let vs = volume.data.shape();
    let (mx, my, mt) = (vs[0], vs[1], vs[2]);
    let (nx, ny) = (fk.spatial.shape()[0], fk.spatial.shape()[1]);
    let nt = fk.temporal.shape()[0];
    let px = padding.resolve(nx);
    let py = padding.resolve(ny);
    let pt = padding.resolve(nt);
    let ox = checked_extent(mx, nx, px)?;
    let oy = checked_extent(my, ny, py)?;
    let ot = checked_extent(mt, nt, pt)?;

    // step 1: 2D spatial convolution of each frame
    let mut spatial = Tensor::zeros(&[ox, oy, mt]);
    for it in 0..mt {
        for ix in 0..ox {
            for iy in 0..oy {
                let mut acc = 0.0;
                for kx in 0..nx {
                    let vx = (ix + kx) as isize - px.0 as isize;
                    if vx < 0 || vx as usize >= mx {
                        continue;
                    }
                    for ky in 0..ny {
                        let vy = (iy + ky) as isize - py.0 as isize;
                        if vy < 0 || vy as usize >= my {
                            continue;
                        }
                        acc += volume.data.at(&[vx as usize, vy as usize, it]) * fk.spatial.at(&[kx, ky]);
                    }
                }
                spatial.set(&[ix, iy, it], acc);
            }
        }
    }

    // step 2: 1D temporal convolution of each fiber
    let mut out = Tensor::zeros(&[ox, oy, ot]);
    for ix in 0..ox {
        for iy in 0..oy {
            for it in 0..ot {
                let mut acc = 0.0;
                for kt in 0..nt {
                    let vt = (it + kt) as isize - pt.0 as isize;
                    if vt < 0 || vt as usize >= mt {
                        continue;
                    }
                    acc += spatial.at(&[ix, iy, vt as usize]) * fk.temporal.at(&[kt]);
                }
                out.set(&[ix, iy, it], acc);
            }
        }
    }
    Ok(out)
}

fn checked_extent(m: usize, n: usize, pad: (usize, usize)) -> Result<usize> {
    let padded = m + pad.0 + pad.1;
    if n == 0 {
        return Err(FstcnError::Invalid("empty kernel".into()));
    }
    if n > padded {
        return Err(FstcnError::Invalid(format!("kernel extent {n} exceeds padded extent {padded}")));
    }
    Ok(padded - n + 1)
}

/// Parameter counts of a direct 3D kernel versus its factorized form:
/// `(n_x*n_y*n_t, n_x*n_y + n_t)`.
pub fn param_savings(nx: usize, ny: usize, nt: usize) -> (usize, usize) {
    (nx * ny * nt, nx * ny + nt)
}

/// Best rank-1 (spatial x temporal) fit of a full 3D kernel, via power
/// iteration on the `(n_x*n_y) x n_t` unfolding. The dominant singular value
/// is folded into the spatial factor. When singular values tie the result is
/// whichever fit the deterministic-seed iteration converges to first; the
/// factorization is not unique in that case.
pub fn best_rank1_fit(kernel: &Tensor, seed: u64) -> Result<(FactorizedKernel, f64)> {
    if kernel.rank() != 3 {
        return Err(FstcnError::shape("best_rank1_fit", "[n_x, n_y, n_t]", format!("{:?}", kernel.shape())));
    }
    let norm = kernel.frobenius_norm();
    if norm == 0.0 {
        return Err(FstcnError::Invalid("rank-1 fit of the zero kernel is undefined up to scale".into()));
    }
    let ks = kernel.shape();
    let (nx, ny, nt) = (ks[0], ks[1], ks[2]);
    let rows = nx * ny;
    // unfolding M[(i,j), l]
    let m = kernel.reshape(&[rows, nt])?;

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..nt).map(|_| rng.gen::<f64>() - 0.5).collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    for _ in 0..500 {
        // u = M v
        for r in 0..rows {
            u[r] = (0..nt).map(|l| m.at(&[r, l]) * v[l]).sum();
        }
        let un = normalize(&mut u);
        // v = M^T u
        let mut v_new = vec![0.0; nt];
        for l in 0..nt {
            v_new[l] = (0..rows).map(|r| m.at(&[r, l]) * u[r]).sum();
        }
        let vn = normalize(&mut v_new);
        let delta: f64 = v_new.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = v_new;
        if un == 0.0 || vn == 0.0 || delta < 1e-15 {
            break;
        }
    }
    // sigma = u^T M v
    let mut sigma = 0.0;
    for r in 0..rows {
        for l in 0..nt {
            sigma += u[r] * m.at(&[r, l]) * v[l];
        }
    }
    let spatial = Tensor::new(vec![nx, ny], u.iter().map(|&x| x * sigma).collect())?;
    let temporal = Tensor::new(vec![nt], v.clone())?;
    let fk = FactorizedKernel { spatial, temporal };
    let residual = kernel.sub(&kron_expand(&fk))?.frobenius_norm();
    Ok((fk, residual))
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// One randomized equivalence trial: max absolute difference between the
/// factorized path and the direct 3D convolution of the expanded kernel.
pub fn equivalence_trial(volume: &VideoVolume, fk: &FactorizedKernel, padding: Padding) -> Result<f64> {
    let direct = conv3d(volume, &kron_expand(fk), padding)?;
    let factorized = conv_factorized(volume, fk, padding)?;
    Ok(direct.sub(&factorized)?.max_abs())
}

/// Shapes and result of one randomized equivalence trial.
#[derive(Clone, Copy, Debug)]
pub struct TrialOutcome {
    pub m_x: usize,
    pub m_y: usize,
    pub m_t: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub error: f64,
}

/// Draw a random volume and factorized kernel (spatial extents up to
/// `max_spatial`/`max_temporal`, kernel extents up to `max_kernel`, kernels
/// never larger than the volume) and run [`equivalence_trial`] with valid
/// padding.
pub fn random_equivalence_trial(
    max_spatial: usize,
    max_temporal: usize,
    max_kernel: usize,
    seed: u64,
) -> Result<TrialOutcome> {
    use rand::{Rng, SeedableRng};
    if max_spatial < 1 || max_temporal < 1 || max_kernel < 1 {
        return Err(FstcnError::Invalid("trial extents must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m_x = rng.gen_range(1..=max_spatial);
    let m_y = rng.gen_range(1..=max_spatial);
    let m_t = rng.gen_range(1..=max_temporal);
    let n_x = rng.gen_range(1..=max_kernel.min(m_x));
    let n_y = rng.gen_range(1..=max_kernel.min(m_y));
    let n_t = rng.gen_range(1..=max_kernel.min(m_t));
    let volume = VideoVolume::new(Tensor::randn(&[m_x, m_y, m_t], 1.0, &mut rng))?;
    let fk = FactorizedKernel::new(
        Tensor::randn(&[n_x, n_y], 1.0, &mut rng),
        Tensor::randn(&[n_t], 1.0, &mut rng),
    )?;
    let error = equivalence_trial(&volume, &fk, Padding::Valid)?;
    Ok(TrialOutcome { m_x, m_y, m_t, n_x, n_y, n_t, error })
}
