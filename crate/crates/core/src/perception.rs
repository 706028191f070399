//! Image-to-occupancy perception network with its losses and metrics.
//!
//! Architecture: strided conv encoder, per-pixel linear lifting to depth
//! planes, bilinear alignment to the grid footprint, and a small 3D conv
//! decoder to per-voxel class logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, OccError, Result};
use crate::params::{ParamVars, Params};
use crate::rng::RngStream;
use crate::synthworld::OccupancyGrid;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub image_hw: [usize; 2],
    pub grid_dims: [usize; 3], // (D, H, W)
    pub num_classes: usize,
    pub enc_channels: [usize; 2],
    pub lift_channels: usize,
    pub dec_channels: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            image_hw: [32, 48],
            grid_dims: [16, 8, 16],
            num_classes: 4,
            enc_channels: [12, 24],
            lift_channels: 8,
            dec_channels: 16,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_hw.iter().any(|&d| d % 4 != 0 || d == 0) {
            return Err(OccError::InvalidConfig(
                "perception image dims must be positive multiples of 4".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(OccError::InvalidConfig("need at least 2 classes".into()));
        }
        if self.grid_dims.iter().any(|&d| d == 0) {
            return Err(OccError::InvalidConfig("grid dims must be positive".into()));
        }
        Ok(())
    }

    /// Encoder output footprint (H/4, W/4).
    pub fn feat_hw(&self) -> [usize; 2] {
        [self.image_hw[0] / 4, self.image_hw[1] / 4]
    }
}

/// The perception model: predicts per-voxel class logits from one RGB frame.
pub struct PerceptionNet<T> {
    pub cfg: PerceptionConfig,
    pub params: Params<T>,
}

fn conv_init<T: Real>(
    shape: &[usize],
    rng: &mut RngStream,
) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl<T: Real> PerceptionNet<T> {
    pub fn init(cfg: PerceptionConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let [e0, e1] = cfg.enc_channels;
        let lc = cfg.lift_channels;
        let d = cfg.grid_dims[0];
        let c = cfg.num_classes;
        let dc = cfg.dec_channels;

        let mut p = Params::new();
        p.insert("enc1/w", conv_init(&[e0, 3, 3, 3], rng));
        p.insert("enc1/b", Tensor::zeros(&[e0, 1, 1]));
        p.insert("enc2/w", conv_init(&[e1, e0, 3, 3], rng));
        p.insert("enc2/b", Tensor::zeros(&[e1, 1, 1]));
        p.insert("lift/w", conv_init(&[lc * d, e1, 1, 1], rng));
        p.insert("lift/b", Tensor::zeros(&[lc * d, 1, 1]));
        p.insert("dec1/w", conv_init(&[dc, lc, 3, 3, 3], rng));
        p.insert("dec1/b", Tensor::zeros(&[dc, 1, 1, 1]));
        p.insert("dec2/w", conv_init(&[c, dc, 3, 3, 3], rng));
        p.insert("dec2/b", Tensor::zeros(&[c, 1, 1, 1]));
        Ok(PerceptionNet { cfg, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Forward pass to voxel logits C x D x H x W.
    pub fn forward(&self, vars: &ParamVars<T>, image: &Var<T>) -> Result<Var<T>> {
        let [h_img, w_img] = self.cfg.image_hw;
        let shape = image.shape();
        if shape != [3, h_img, w_img] {
            return Err(shape_err(format!(
                "perception expects [3, {h_img}, {w_img}], got {shape:?}"
            )));
        }
        let [dgrid, hgrid, wgrid] = self.cfg.grid_dims;
        let lc = self.cfg.lift_channels;
        let [fh, fw] = self.cfg.feat_hw();

        let x = image
            .conv(&vars.get("enc1/w")?, &[2, 2], &[1, 1])?
            .add(&vars.get("enc1/b")?)?
            .silu()?;
        let x = x
            .conv(&vars.get("enc2/w")?, &[2, 2], &[1, 1])?
            .add(&vars.get("enc2/b")?)?
            .silu()?;
        // per-pixel linear lift to depth planes
        let x = x.conv(&vars.get("lift/w")?, &[1, 1], &[0, 0])?.add(&vars.get("lift/b")?)?;
        let vol = x.reshape(&[lc, dgrid, fh, fw])?;
        // align the image-plane footprint with the grid footprint
        let vol = if [fh, fw] == [hgrid, wgrid] {
            vol
        } else {
            vol.resize_bilinear(hgrid, wgrid)?
        };
        let vol = vol
            .conv(&vars.get("dec1/w")?, &[1, 1, 1], &[1, 1, 1])?
            .add(&vars.get("dec1/b")?)?
            .silu()?;
        vol.conv(&vars.get("dec2/w")?, &[1, 1, 1], &[1, 1, 1])?.add(&vars.get("dec2/b")?)
    }

    /// Frozen forward on a plain tensor.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.params.lift(&tape, false);
        Ok(self.forward(&vars, &tape.constant(image.clone()))?.value())
    }

    /// Frozen forward plus argmax to a grid.
    pub fn predict_grid(&self, image: &Tensor<T>, voxel_size: f64) -> Result<OccupancyGrid> {
        let logits = self.predict(image)?;
        logits_to_grid(&logits, voxel_size)
    }
}

/// Argmax over the class axis of C x D x H x W logits.
pub fn logits_to_grid<T: Real>(logits: &Tensor<T>, voxel_size: f64) -> Result<OccupancyGrid> {
    if logits.rank() != 4 {
        return Err(shape_err(format!("logits must be C×D×H×W, got {:?}", logits.shape())));
    }
    let c = logits.shape()[0];
    let dims = [logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let sz: usize = dims.iter().product();
    let mut labels = vec![0u8; sz];
    for v in 0..sz {
        let mut best = 0usize;
        let mut best_val = logits.data()[v];
        for ci in 1..c {
            let val = logits.data()[ci * sz + v];
            if val > best_val {
                best_val = val;
                best = ci;
            }
        }
        labels[v] = best as u8;
    }
    Ok(OccupancyGrid { dims, voxel_size, labels, num_classes: c as u8 })
}

/// Balancing coefficients of the perception loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_sem: f64,
    pub lambda_geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_ce: 1.0, lambda_sem: 1.0, lambda_geo: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.lambda_ce, self.lambda_sem, self.lambda_geo] {
            if !v.is_finite() || v < 0.0 {
                return Err(OccError::InvalidConfig(format!("loss weight {v} invalid")));
            }
        }
        Ok(())
    }
}

fn check_logits_vs_grid<T: Real>(logits: &Var<T>, gt: &OccupancyGrid) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 4
        || shape[1] != gt.dims[0]
        || shape[2] != gt.dims[1]
        || shape[3] != gt.dims[2]
        || shape[0] != gt.num_classes as usize
    {
        return Err(shape_err(format!(
            "logits {shape:?} vs grid dims {:?} with {} classes",
            gt.dims, gt.num_classes
        )));
    }
    Ok((shape[0], gt.dims.iter().product()))
}

/// Class-weighted cross-entropy, averaged over voxels.
pub fn loss_ce<T: Real>(
    logits: &Var<T>,
    gt: &OccupancyGrid,
    class_weights: &[f64],
) -> Result<Var<T>> {
    let (c, v) = check_logits_vs_grid(logits, gt)?;
    if class_weights.len() != c {
        return Err(shape_err(format!("{} class weights for {c} classes", class_weights.len())));
    }
    if class_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(OccError::InvalidRange("class weights must be positive".into()));
    }
    let logp = logits.log_softmax(0)?;
    // constant mask carrying -w[gt]/V at each voxel's true-class slot
    let mut mask = vec![T::ZERO; c * v];
    for (i, &label) in gt.labels.iter().enumerate() {
        mask[(label as usize) * v + i] = T::of(-class_weights[label as usize] / v as f64);
    }
    let mask = logits.tape().constant(Tensor::from_vec(logp.shape(), mask)?);
    logp.mul(&mask)?.sum_all()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalMode {
    Semantic,
    Geometric,
}

/// Soft precision / recall / specificity loss over softmax probabilities,
/// averaged over the classes present; the geometric mode runs the same
/// formula on the binarized occupied/free split.
pub fn loss_scal<T: Real>(logits: &Var<T>, gt: &OccupancyGrid, mode: ScalMode) -> Result<Var<T>> {
    let (c, v) = check_logits_vs_grid(logits, gt)?;
    let tape = logits.tape().clone();
    let probs = logits.softmax(0)?;

    // per-"class" probability planes and ground-truth masks
    let (planes, masks): (Vec<Var<T>>, Vec<Vec<bool>>) = match mode {
        ScalMode::Semantic => {
            let planes = (0..c)
                .map(|ci| probs.slice(0, ci, 1)?.reshape(&[v]))
                .collect::<Result<Vec<_>>>()?;
            let masks = (0..c)
                .map(|ci| gt.labels.iter().map(|&l| l as usize == ci).collect())
                .collect();
            (planes, masks)
        }
        ScalMode::Geometric => {
            let free = probs.slice(0, 0, 1)?.reshape(&[v])?;
            let occupied = probs.slice(0, 1, c - 1)?.sum_axis(0)?.reshape(&[v])?;
            let free_mask: Vec<bool> = gt.labels.iter().map(|&l| l == 0).collect();
            let occ_mask: Vec<bool> = gt.labels.iter().map(|&l| l != 0).collect();
            (vec![free, occupied], vec![free_mask, occ_mask])
        }
    };

    const EPS: f64 = 1e-12;
    let mut class_losses: Vec<Var<T>> = Vec::new();
    for (plane, mask) in planes.iter().zip(&masks) {
        let gc = mask.iter().filter(|&&m| m).count();
        let pm_val: f64 = plane
            .value()
            .data()
            .iter()
            .map(|&x| x.to_f64())
            .sum();
        if gc == 0 && pm_val <= 0.0 {
            continue; // degenerate class: absent from prediction mass and ground truth
        }
        let mask_t: Vec<T> = mask.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect();
        let mask_v = tape.constant(Tensor::from_vec(vec![v], mask_t)?);
        let neg = v - gc;

        let mut terms: Vec<Var<T>> = Vec::new();
        if gc > 0 {
            let tp = plane.mul(&mask_v)?.sum_all()?;
            if pm_val > 0.0 {
                let pm = plane.sum_all()?;
                terms.push(tp.div(&pm)?.add_scalar(EPS)?.log()?); // precision
            }
            terms.push(tp.mul_scalar(1.0 / gc as f64)?.add_scalar(EPS)?.log()?); // recall
        }
        if neg > 0 {
            // tn = sum over non-class voxels of (1 - p)
            let inv_mask: Vec<T> =
                mask.iter().map(|&m| if m { T::ZERO } else { T::ONE }).collect();
            let inv_mask_v = tape.constant(Tensor::from_vec(vec![v], inv_mask)?);
            let one = tape.constant(Tensor::ones(&[v]));
            let tn = one.sub(plane)?.mul(&inv_mask_v)?.sum_all()?;
            terms.push(tn.mul_scalar(1.0 / neg as f64)?.add_scalar(EPS)?.log()?); // specificity
        }
        if terms.is_empty() {
            continue;
        }
        let n_terms = terms.len() as f64;
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = acc.add(t)?;
        }
        class_losses.push(acc.mul_scalar(-1.0 / n_terms)?);
    }

    if class_losses.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::ZERO)));
    }
    let n = class_losses.len() as f64;
    let mut acc = class_losses[0].clone();
    for l in &class_losses[1..] {
        acc = acc.add(l)?;
    }
    acc.mul_scalar(1.0 / n)
}

/// Total perception loss: lambda_ce*L_ce + lambda_sem*L_sem + lambda_geo*L_geo.
pub fn perception_loss<T: Real>(
    logits: &Var<T>,
    gt: &OccupancyGrid,
    weights: &LossWeights,
    class_weights: &[f64],
) -> Result<Var<T>> {
    weights.validate()?;
    let ce = loss_ce(logits, gt, class_weights)?.mul_scalar(weights.lambda_ce)?;
    let sem = loss_scal(logits, gt, ScalMode::Semantic)?.mul_scalar(weights.lambda_sem)?;
    let geo = loss_scal(logits, gt, ScalMode::Geometric)?.mul_scalar(weights.lambda_geo)?;
    ce.add(&sem)?.add(&geo)
}

/// Per-class intersection-over-union and its mean.
#[derive(Debug, Clone)]
pub struct MiouReport {
    /// None where the union is empty (class absent from both grids).
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: &OccupancyGrid, gt: &OccupancyGrid, ignore_free: bool) -> Result<MiouReport> {
    if pred.dims != gt.dims || pred.num_classes != gt.num_classes {
        return Err(shape_err(format!(
            "miou dims {:?}/{} vs {:?}/{}",
            pred.dims, pred.num_classes, gt.dims, gt.num_classes
        )));
    }
    let c = gt.num_classes as usize;
    let mut inter = vec![0usize; c];
    let mut union = vec![0usize; c];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let start = if ignore_free { 1 } else { 0 };
    let mut per_class = vec![None; c];
    let mut sum = 0.0;
    let mut n = 0usize;
    for ci in 0..c {
        if union[ci] > 0 {
            let iou = inter[ci] as f64 / union[ci] as f64;
            per_class[ci] = Some(iou);
            if ci >= start {
                sum += iou;
                n += 1;
            }
        }
    }
    Ok(MiouReport { per_class, mean: if n > 0 { sum / n as f64 } else { 0.0 } })
}

/// Binary occupied-vs-free IoU (free class against the rest).
pub fn occupancy_iou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(shape_err("occupancy_iou dims differ"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (po, go) = (p != 0, g != 0);
        if po && go {
            inter += 1;
        }
        if po || go {
            union += 1;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Inverse-frequency class weights from a histogram, clipped to [0.1, 10].
pub fn class_weights_from_histogram(hist: &[usize]) -> Vec<f64> {
    let total: usize = hist.iter().sum();
    let c = hist.len();
    hist.iter()
        .map(|&n| {
            if n == 0 {
                10.0
            } else {
                (total as f64 / (c as f64 * n as f64)).clamp(0.1, 10.0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid(labels: Vec<u8>, dims: [usize; 3]) -> OccupancyGrid {
        OccupancyGrid { dims, voxel_size: 0.5, labels, num_classes: 4 }
    }

    #[test]
    fn forward_shape_contract() {
        let mut rng = RngStream::new(1);
        let net = PerceptionNet::<f32>::init(PerceptionConfig::default(), &mut rng).unwrap();
        let img = Tensor::zeros(&[3, 32, 48]);
        let logits = net.predict(&img).unwrap();
        assert_eq!(logits.shape(), &[4, 16, 8, 16]);
        assert!(logits.all_finite());
    }

    #[test]
    fn zero_final_layer_means_free_everywhere() {
        let mut rng = RngStream::new(2);
        let mut net = PerceptionNet::<f32>::init(PerceptionConfig::default(), &mut rng).unwrap();
        net.params.set("dec2/w", Tensor::zeros(&[4, 16, 3, 3, 3])).unwrap();
        net.params.set("dec2/b", Tensor::zeros(&[4, 1, 1, 1])).unwrap();
        let img = Tensor::randn(&[3, 32, 48], 1.0, &mut rng);
        let logits = net.predict(&img).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let grid = logits_to_grid(&logits, 0.5).unwrap();
        assert!(grid.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[4, 2, 1, 2]));
        let gt = tiny_grid(vec![1, 1, 2, 0], [2, 1, 2]);
        let l = loss_ce(&logits, &gt, &[1.0; 4]).unwrap();
        assert!((l.value().item() - 4.0f64.ln()).abs() < 1e-12);
        // doubling the weights doubles the loss
        let l2 = loss_ce(&logits, &gt, &[2.0; 4]).unwrap();
        assert!((l2.value().item() - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_approaches_zero() {
        let tape = Tape::<f64>::new();
        let gt = tiny_grid(vec![1, 1, 2, 0], [2, 1, 2]);
        let v = 4usize;
        let mut data = vec![0.0f64; 4 * v];
        for (i, &l) in gt.labels.iter().enumerate() {
            data[(l as usize) * v + i] = 50.0;
        }
        let logits = tape.constant(Tensor::from_vec(vec![4, 2, 1, 2], data).unwrap());
        let l = loss_ce(&logits, &gt, &[1.0; 4]).unwrap();
        assert!(l.value().item() < 1e-12);
    }

    #[test]
    fn scal_perfect_prediction_is_zero() {
        let tape = Tape::<f64>::new();
        let gt = tiny_grid(vec![1, 1, 2, 0], [2, 1, 2]);
        let v = 4usize;
        let mut data = vec![-500.0f64; 4 * v];
        for (i, &l) in gt.labels.iter().enumerate() {
            data[(l as usize) * v + i] = 500.0;
        }
        let logits = tape.constant(Tensor::from_vec(vec![4, 2, 1, 2], data).unwrap());
        for mode in [ScalMode::Semantic, ScalMode::Geometric] {
            let l = loss_scal(&logits, &gt, mode).unwrap();
            assert!(l.value().item().abs() < 1e-6, "{mode:?}: {}", l.value().item());
        }
    }

    #[test]
    fn scal_uniform_recall_is_one_over_c() {
        // uniform probabilities: recall term contributes -ln(1/C) per class;
        // we verify through the loss of a single-class-only grid
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[4, 1, 1, 4]));
        let gt = tiny_grid(vec![2, 2, 2, 2], [1, 1, 4]);
        let probs = logits.softmax(0).unwrap().value();
        // soft recall of class 2 under uniform probs is exactly 1/C
        let v = 4usize;
        let tp: f64 = (0..v).map(|i| probs.data()[2 * v + i]).sum();
        assert!((tp / v as f64 - 0.25).abs() < 1e-12);
        let _ = loss_scal(&logits, &gt, ScalMode::Semantic).unwrap();
    }

    #[test]
    fn scal_all_free_agreement_is_zero() {
        let tape = Tape::<f64>::new();
        let gt = tiny_grid(vec![0, 0, 0, 0], [1, 1, 4]);
        let v = 4usize;
        let mut data = vec![-500.0f64; 4 * v];
        for i in 0..v {
            data[i] = 500.0;
        }
        let logits = tape.constant(Tensor::from_vec(vec![4, 1, 1, 4], data).unwrap());
        let l = loss_scal(&logits, &gt, ScalMode::Geometric).unwrap();
        assert!(l.value().item().abs() < 1e-6);
    }

    #[test]
    fn total_loss_is_weighted_sum_of_components() {
        let mut rng = RngStream::new(3);
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::randn(&[4, 2, 1, 2], 1.0, &mut rng));
        let gt = tiny_grid(vec![1, 3, 2, 0], [2, 1, 2]);
        let w = LossWeights { lambda_ce: 0.5, lambda_sem: 2.0, lambda_geo: 3.0 };
        let cw = [1.0; 4];
        let total = perception_loss(&logits, &gt, &w, &cw).unwrap().value().item();
        let ce = loss_ce(&logits, &gt, &cw).unwrap().value().item();
        let sem = loss_scal(&logits, &gt, ScalMode::Semantic).unwrap().value().item();
        let geo = loss_scal(&logits, &gt, ScalMode::Geometric).unwrap().value().item();
        assert!((total - (0.5 * ce + 2.0 * sem + 3.0 * geo)).abs() < 1e-12);
    }

    #[test]
    fn miou_hand_case() {
        let gt = tiny_grid(vec![1, 1, 2, 0], [2, 1, 2]);
        let pred = tiny_grid(vec![1, 2, 2, 0], [2, 1, 2]);
        let rep = miou(&pred, &gt, true).unwrap();
        assert_eq!(rep.per_class[1], Some(0.5));
        assert_eq!(rep.per_class[2], Some(0.5));
        assert_eq!(rep.per_class[3], None);
        assert!((rep.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn miou_identity_and_disjoint() {
        let gt = tiny_grid(vec![1, 2, 3, 0], [2, 1, 2]);
        let rep = miou(&gt, &gt, false).unwrap();
        assert!((rep.mean - 1.0).abs() < 1e-12);
        let pred = tiny_grid(vec![2, 1, 0, 3], [2, 1, 2]);
        let rep2 = miou(&pred, &gt, true).unwrap();
        assert_eq!(rep2.per_class[1], Some(0.0));
        assert!((rep2.mean - 0.0).abs() < 1e-12);
    }

    #[test]
    fn miou_is_symmetric_and_permutation_invariant() {
        let gt = tiny_grid(vec![1, 1, 2, 0, 3, 3, 0, 2], [2, 2, 2]);
        let pred = tiny_grid(vec![1, 2, 2, 0, 3, 1, 0, 0], [2, 2, 2]);
        let a = miou(&pred, &gt, true).unwrap();
        let b = miou(&gt, &pred, true).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
        // apply the same voxel permutation to both
        let perm = [3usize, 1, 0, 2, 7, 5, 6, 4];
        let apply = |g: &OccupancyGrid| {
            let labels = perm.iter().map(|&i| g.labels[i]).collect();
            OccupancyGrid { labels, ..g.clone() }
        };
        let c = miou(&apply(&pred), &apply(&gt), true).unwrap();
        assert!((a.mean - c.mean).abs() < 1e-12);
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let w = class_weights_from_histogram(&[800, 100, 100, 0]);
        assert!((w[0] - 1000.0 / (4.0 * 800.0)).abs() < 1e-12);
        assert!((w[1] - 2.5).abs() < 1e-12);
        assert_eq!(w[3], 10.0);
        // clipping on both ends (lower clip needs many classes)
        let mut hist = vec![0usize; 20];
        hist[0] = 1;
        hist[1] = 1_000_000;
        let w2 = class_weights_from_histogram(&hist);
        assert_eq!(w2[0], 10.0);
        assert_eq!(w2[1], 0.1);
    }

    #[test]
    fn losses_pass_gradient_check() {
        let mut rng = RngStream::new(4);
        let gt = tiny_grid(vec![1, 3, 2, 0, 0, 1, 2, 2], [2, 2, 2]);
        let x0 = Tensor::<f64>::randn(&[4, 2, 2, 2], 1.0, &mut rng);
        let gt2 = gt.clone();
        let f_ce = move |_t: &Tape<f64>, xs: &[Var<f64>]| loss_ce(&xs[0], &gt2, &[1.0, 2.0, 0.5, 1.5]);
        let rep = crate::autodiff::grad_check(&f_ce, &[x0.clone()], 1e-5, 1e-6).unwrap();
        assert!(rep.pass, "ce grad check: {}", rep.max_rel_err);
        for mode in [ScalMode::Semantic, ScalMode::Geometric] {
            let gt3 = gt.clone();
            let f = move |_t: &Tape<f64>, xs: &[Var<f64>]| loss_scal(&xs[0], &gt3, mode);
            let rep = crate::autodiff::grad_check(&f, &[x0.clone()], 1e-5, 1e-5).unwrap();
            assert!(rep.pass, "{mode:?} grad check: {}", rep.max_rel_err);
        }
    }
}
