//! Autoregressive convolution masks and perturbation probes for receptive
//! fields and causality.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor};

/// Type A excludes the centre position, type B includes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskType {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Top-to-bottom, left-to-right.
    Forward,
    /// Bottom-to-top, right-to-left.
    Reverse,
}

/// Pixel ordering plus the number of colour groups that are ordered inside
/// a pixel (1 = grayscale / no within-pixel ordering, 3 = R, G, B).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterOrder {
    pub direction: Direction,
    pub channel_groups: usize,
}

impl RasterOrder {
    pub fn forward() -> Self {
        RasterOrder {
            direction: Direction::Forward,
            channel_groups: 1,
        }
    }

    pub fn reverse() -> Self {
        RasterOrder {
            direction: Direction::Reverse,
            channel_groups: 1,
        }
    }

    /// Position of pixel `(row, col)` in the scan.
    pub fn rank(&self, (row, col): (usize, usize), width: usize, height: usize) -> usize {
        match self.direction {
            Direction::Forward => row * width + col,
            Direction::Reverse => (height - 1 - row) * width + (width - 1 - col),
        }
    }
}

/// Which half of a blind-spot-free stack a filter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StackKind {
    /// Full raster mask.
    Full,
    /// Rows strictly above the centre (type A) or up to and including the
    /// centre row (type B). Vertical features at row `i` only ever depend on
    /// rows `< i`, so the whole centre row is safe after the first layer.
    Vertical,
    /// Centre row only, left of the centre (A) or up to the centre (B).
    Horizontal,
}

/// Binary `[kh, kw, cin, cout]` filter mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterMask {
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    mask_type: MaskType,
    bits: Vec<bool>,
}

impl FilterMask {
    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.cin, self.cout)
    }

    pub fn mask_type(&self) -> MaskType {
        self.mask_type
    }

    pub fn get(&self, ky: usize, kx: usize, ci: usize, co: usize) -> bool {
        self.bits[((ky * self.kw + kx) * self.cin + ci) * self.cout + co]
    }

    /// Spatial positions with at least one enabled channel pair.
    pub fn support(&self) -> BTreeSet<(usize, usize)> {
        let tap = self.cin * self.cout;
        let mut out = BTreeSet::new();
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let o = (ky * self.kw + kx) * tap;
                if self.bits[o..o + tap].iter().any(|&b| b) {
                    out.insert((ky, kx));
                }
            }
        }
        out
    }

    pub fn count_enabled(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn rot180(&self) -> FilterMask {
        let tap = self.cin * self.cout;
        let mut bits = vec![false; self.bits.len()];
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let src = (ky * self.kw + kx) * tap;
                let dst = ((self.kh - 1 - ky) * self.kw + (self.kw - 1 - kx)) * tap;
                bits[dst..dst + tap].copy_from_slice(&self.bits[src..src + tap]);
            }
        }
        FilterMask { bits, ..self.clone() }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.kh, self.kw, self.cin, self.cout], data).expect("mask shape")
    }

    pub fn to_shared_tensor<T: Real>(&self) -> Arc<Tensor<T>> {
        Arc::new(self.to_tensor())
    }
}

fn check_kernel(kh: usize, kw: usize, cin: usize, cout: usize, groups: usize) -> Result<()> {
    if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "masked filters need odd kernel dimensions, got {kh}x{kw}"
        )));
    }
    if cin == 0 || cout == 0 || groups == 0 {
        return Err(Error::InvalidArgument("mask channels and groups must be positive".into()));
    }
    if groups > 1 && (cin % groups != 0 || cout % groups != 0) {
        return Err(Error::InvalidArgument(format!(
            "channel counts {cin}/{cout} are not divisible into {groups} colour groups"
        )));
    }
    Ok(())
}

/// Forward raster mask. Rows above the centre are enabled, the centre row is
/// enabled left of the centre, rows below are disabled. At the centre,
/// channels are split into `groups` contiguous colour groups: type A lets
/// output group `g` see input groups `< g`, type B groups `<= g`.
pub fn build_forward_mask(
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    mask_type: MaskType,
    groups: usize,
) -> Result<FilterMask> {
    check_kernel(kh, kw, cin, cout, groups)?;
    let (cy, cx) = (kh / 2, kw / 2);
    let mut bits = vec![false; kh * kw * cin * cout];
    for ky in 0..kh {
        for kx in 0..kw {
            for ci in 0..cin {
                for co in 0..cout {
                    let on = if ky < cy || (ky == cy && kx < cx) {
                        true
                    } else if ky == cy && kx == cx {
                        let gi = ci * groups / cin;
                        let go = co * groups / cout;
                        match mask_type {
                            MaskType::A => gi < go,
                            MaskType::B => gi <= go,
                        }
                    } else {
                        false
                    };
                    bits[((ky * kw + kx) * cin + ci) * cout + co] = on;
                }
            }
        }
    }
    Ok(FilterMask {
        kh,
        kw,
        cin,
        cout,
        mask_type,
        bits,
    })
}

/// Reverse raster mask: the forward mask rotated by 180 degrees.
pub fn build_reverse_mask(
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    mask_type: MaskType,
    groups: usize,
) -> Result<FilterMask> {
    Ok(build_forward_mask(kh, kw, cin, cout, mask_type, groups)?.rot180())
}

/// Mask for one half of a vertical/horizontal stack pair (no within-pixel
/// channel ordering).
pub fn build_stack_mask(
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    mask_type: MaskType,
    stack: StackKind,
    direction: Direction,
) -> Result<FilterMask> {
    let full = build_forward_mask(kh, kw, cin, cout, mask_type, 1)?;
    let cy = kh / 2;
    let mask = match stack {
        StackKind::Full => full,
        StackKind::Vertical => {
            let mut bits = vec![false; full.bits.len()];
            let tap = cin * cout;
            let last_row = match mask_type {
                MaskType::A => cy,
                MaskType::B => cy + 1,
            };
            bits[..last_row * kw * tap].fill(true);
            FilterMask { bits, ..full }
        }
        StackKind::Horizontal => {
            let tap = cin * cout;
            let mut bits = full.bits.clone();
            for ky in (0..kh).filter(|&r| r != cy) {
                bits[ky * kw * tap..(ky + 1) * kw * tap].fill(false);
            }
            FilterMask { bits, ..full }
        }
    };
    Ok(match direction {
        Direction::Forward => mask,
        Direction::Reverse => mask.rot180(),
    })
}

/// A deterministic image-to-image map that can be probed by perturbation.
///
/// Inputs and outputs are `[height, width, channels]`.
pub trait ProbeNetwork {
    fn input_shape(&self) -> [usize; 3];

    /// Colour groups ordered within a pixel (see [`RasterOrder`]).
    fn channel_groups(&self) -> usize {
        1
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, input: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Measured set of input positions influencing one output position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub probe: (usize, usize),
    pub positions: BTreeSet<(usize, usize)>,
}

impl ReceptiveField {
    /// `(rows, cols)` of the bounding box, or `(0, 0)` for an empty field.
    pub fn bounding_box(&self) -> (usize, usize) {
        if self.positions.is_empty() {
            return (0, 0);
        }
        let rows = self.positions.iter().map(|p| p.0);
        let cols = self.positions.iter().map(|p| p.1);
        let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap());
        let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap());
        (r1 - r0 + 1, c1 - c0 + 1)
    }

    pub fn extent_above(&self) -> usize {
        self.positions
            .iter()
            .map(|p| self.probe.0.saturating_sub(p.0))
            .max()
            .unwrap_or(0)
    }
}

fn random_input(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
}

fn changed(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).any(|(x, y)| x != y)
}

/// Input positions whose perturbation (+1.0 on any channel of a zero-mean
/// random input) changes any output channel at `probe`.
pub fn measure_receptive_field(net: &dyn ProbeNetwork, probe: (usize, usize), seed: u64) -> Result<ReceptiveField> {
    if !net.is_deterministic() {
        return Err(Error::NonDeterministic);
    }
    let shape = net.input_shape();
    let [h, w, c] = shape;
    if probe.0 >= h || probe.1 >= w {
        return Err(Error::InvalidArgument(format!("probe {probe:?} outside {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_input(shape, &mut rng);
    let base_out = net.evaluate(&base)?;
    let oc = base_out.last_dim();
    let at = |t: &Tensor<f64>| {
        let o = (probe.0 * w + probe.1) * oc;
        t.data()[o..o + oc].to_vec()
    };
    let reference = at(&base_out);
    let mut positions = BTreeSet::new();
    let mut probe_in = base.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let idx = (y * w + x) * c + ch;
                probe_in.data_mut()[idx] += 1.0;
                let out = net.evaluate(&probe_in)?;
                probe_in.data_mut()[idx] = base.data()[idx];
                if changed(&at(&out), &reference) {
                    positions.insert((y, x));
                    break;
                }
            }
        }
    }
    Ok(ReceptiveField { probe, positions })
}

/// One output position that reacted to an input it must not depend on.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub output: (usize, usize),
    pub input: (usize, usize),
    pub input_channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub order: RasterOrder,
    pub trials: usize,
    pub evaluations: usize,
    pub violations: Vec<Violation>,
}

impl CausalityReport {
    pub fn is_causal(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks exact autoregressive causality under `order`: every output pixel
/// `k` must be unchanged by perturbing any input at a later position, and by
/// same-position input channels whose colour group is not strictly earlier
/// than the output channel's group.
pub fn verify_causality(net: &dyn ProbeNetwork, order: RasterOrder, trials: usize, seed: u64) -> Result<CausalityReport> {
    if !net.is_deterministic() {
        return Err(Error::NonDeterministic);
    }
    let shape = net.input_shape();
    let [h, w, c] = shape;
    let groups = order.channel_groups.max(net.channel_groups());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = BTreeSet::new();
    let mut evaluations = 0;
    for _ in 0..trials.max(1) {
        let base = random_input(shape, &mut rng);
        let base_out = net.evaluate(&base)?;
        evaluations += 1;
        let oc = base_out.last_dim();
        let mut probe_in = base.clone();
        for y in 0..h {
            for x in 0..w {
                let input_rank = order.rank((y, x), w, h);
                for ch in 0..c {
                    let idx = (y * w + x) * c + ch;
                    probe_in.data_mut()[idx] += 1.0;
                    let out = net.evaluate(&probe_in)?;
                    evaluations += 1;
                    probe_in.data_mut()[idx] = base.data()[idx];
                    for oy in 0..h {
                        for ox in 0..w {
                            let out_rank = order.rank((oy, ox), w, h);
                            if out_rank > input_rank {
                                continue;
                            }
                            let o = (oy * w + ox) * oc;
                            let (a, b) = (&out.data()[o..o + oc], &base_out.data()[o..o + oc]);
                            let bad = if out_rank < input_rank {
                                changed(a, b)
                            } else {
                                let gi = ch * groups / c;
                                (0..oc).any(|co| a[co] != b[co] && gi >= co * groups / oc)
                            };
                            if bad {
                                violations.insert(Violation {
                                    output: (oy, ox),
                                    input: (y, x),
                                    input_channel: ch,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(CausalityReport {
        order,
        trials: trials.max(1),
        evaluations,
        violations: violations.into_iter().collect(),
    })
}
