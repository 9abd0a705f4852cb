use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Activation, DenseLayout, LatentEmbedding, Modality, ModelSpec, Parameters, ScoreVector, Tensor, TrainConfig};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Samples per parallel work unit in [`loss_and_grad`]. Fixed so that the
/// reduction order, and hence the result, does not depend on thread count.
const GRAD_CHUNK: usize = 8;

/// One training sample: an input per extractor (in spec order) and the class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Vec<Tensor>,
    pub label: usize,
}

struct LayerCache {
    input: Vec<f64>,
    /// Post-activation, pre-dropout.
    act: Vec<f64>,
    mask: Option<Vec<f64>>,
}

fn dense(l: &DenseLayout, values: &[f64], x: &[f64]) -> Vec<f64> {
    let w = &values[l.weights.clone()];
    let mut y = values[l.biases.clone()].to_vec();
    for (i, &xi) in x.iter().enumerate() {
        // voxel and bit-map inputs are mostly zero
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * l.fan_out..(i + 1) * l.fan_out];
        for (yo, wo) in y.iter_mut().zip(row) {
            *yo += xi * wo;
        }
    }
    y
}

fn activate(a: Activation, v: &mut [f64]) {
    match a {
        Activation::Linear => {}
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
    }
}

fn check_finite(layer: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.to_string() })
    }
}

fn forward_stack(
    layers: &[DenseLayout],
    values: &[f64],
    mut x: Vec<f64>,
    mut dropout: Option<&mut ChaCha8Rng>,
    mut cache: Option<&mut Vec<LayerCache>>,
) -> Result<Vec<f64>> {
    for l in layers {
        let mut y = dense(l, values, &x);
        activate(l.activation, &mut y);
        check_finite(&l.name, &y)?;
        let mask = match dropout.as_deref_mut() {
            Some(rng) if l.dropout > 0.0 => {
                let keep = 1.0 - l.dropout;
                Some((0..y.len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect::<Vec<_>>())
            }
            _ => None,
        };
        let out = match &mask {
            Some(m) => y.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => y.clone(),
        };
        if let Some(c) = cache.as_deref_mut() {
            c.push(LayerCache { input: x, act: y, mask });
        }
        x = out;
    }
    Ok(x)
}

/// Backpropagates `grad_out` through a cached stack, accumulating into
/// `grad`. Returns the gradient w.r.t. the stack input when requested.
fn backward_stack(
    layers: &[DenseLayout],
    values: &[f64],
    caches: &[LayerCache],
    mut grad_out: Vec<f64>,
    grad: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    for (idx, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
        let mut delta = grad_out;
        if let Some(m) = &c.mask {
            delta.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
        }
        match l.activation {
            Activation::Linear => {}
            Activation::Relu => delta.iter_mut().zip(&c.act).for_each(|(d, a)| {
                if *a <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => delta.iter_mut().zip(&c.act).for_each(|(d, a)| *d *= 1.0 - a * a),
        }
        let fo = l.fan_out;
        {
            let gw = &mut grad[l.weights.clone()];
            for (i, &xi) in c.input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (g, d) in gw[i * fo..(i + 1) * fo].iter_mut().zip(&delta) {
                    *g += xi * d;
                }
            }
        }
        for (g, d) in grad[l.biases.clone()].iter_mut().zip(&delta) {
            *g += d;
        }
        if idx == 0 && !want_input_grad {
            return Vec::new();
        }
        let w = &values[l.weights.clone()];
        grad_out = (0..l.fan_in)
            .map(|i| w[i * fo..(i + 1) * fo].iter().zip(&delta).map(|(a, b)| a * b).sum())
            .collect();
    }
    grad_out
}

/// Index ranges of each extractor's layers and the fusion head in the layout.
fn stack_ranges(spec: &ModelSpec) -> (Vec<std::ops::Range<usize>>, std::ops::Range<usize>) {
    let mut start = 0;
    let ext = spec
        .extractors
        .iter()
        .map(|e| {
            let r = start..start + e.layers.len();
            start = r.end;
            r
        })
        .collect();
    (ext, start..start + spec.fusion_layers.len())
}

fn check_params(params: &Parameters, spec: &ModelSpec) -> Result<()> {
    let expect = spec.layout();
    if params.layout != expect {
        return Err(Error::invalid("parameters were built for a different model spec"));
    }
    Ok(())
}

fn softmax(logits: &[f64], layer: &str) -> Result<Vec<f64>> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let s: Vec<f64> = exp.iter().map(|e| e / sum).collect();
    check_finite(layer, &s)?;
    Ok(s)
}

pub fn extract_features(params: &Parameters, spec: &ModelSpec, input: &Tensor, modality: Modality) -> Result<LatentEmbedding> {
    check_params(params, spec)?;
    let (idx, ext) = spec
        .extractor(modality)
        .ok_or_else(|| Error::invalid(format!("model has no {} extractor", modality.name())))?;
    if input.shape != ext.input_shape {
        return Err(Error::invalid(format!(
            "{} input shape {:?} does not match {:?}",
            modality.name(),
            input.shape,
            ext.input_shape
        )));
    }
    let (ranges, _) = stack_ranges(spec);
    let z = forward_stack(&params.layout[ranges[idx].clone()], &params.values, input.data.clone(), None, None)?;
    Ok(LatentEmbedding { modality, z })
}

/// Stacks latents row-wise; they must come in modality order with equal length.
pub fn fuse(embeddings: &[LatentEmbedding]) -> Result<Tensor> {
    let first = embeddings.first().ok_or_else(|| Error::invalid("nothing to fuse"))?;
    let d = first.z.len();
    for pair in embeddings.windows(2) {
        if pair[0].modality >= pair[1].modality {
            return Err(Error::invalid("latents must be ordered gps, lidar, image"));
        }
    }
    if embeddings.iter().any(|e| e.z.len() != d) {
        return Err(Error::invalid("latent lengths differ"));
    }
    let data = embeddings.iter().flat_map(|e| e.z.iter().copied()).collect();
    Ok(Tensor { shape: vec![embeddings.len(), d], data })
}

/// Appends the rows of `b` below those of `a`.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::invalid(format!("cannot stack {:?} on {:?}", b.shape, a.shape)));
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor { shape: vec![a.shape[0] + b.shape[0], a.shape[1]], data })
}

pub fn fusion_forward(params: &Parameters, spec: &ModelSpec, z: &Tensor) -> Result<ScoreVector> {
    check_params(params, spec)?;
    let expect = vec![spec.extractors.len(), spec.latent_dim];
    if z.shape != expect {
        return Err(Error::invalid(format!("fused latent shape {:?}, expected {expect:?}", z.shape)));
    }
    let (_, fusion) = stack_ranges(spec);
    let layers = &params.layout[fusion];
    let logits = forward_stack(layers, &params.values, z.data.clone(), None, None)?;
    let s = softmax(&logits, &layers[layers.len() - 1].name)?;
    Ok(ScoreVector { s })
}

/// Centralized inference: every extractor, fusion, softmax.
pub fn predict(params: &Parameters, spec: &ModelSpec, inputs: &[Tensor]) -> Result<ScoreVector> {
    if inputs.len() != spec.extractors.len() {
        return Err(Error::invalid(format!("expected {} inputs, got {}", spec.extractors.len(), inputs.len())));
    }
    let latents = spec
        .extractors
        .iter()
        .zip(inputs)
        .map(|(e, x)| extract_features(params, spec, x, e.modality))
        .collect::<Result<Vec<_>>>()?;
    fusion_forward(params, spec, &fuse(&latents)?)
}

fn check_example(spec: &ModelSpec, ex: &Example) -> Result<()> {
    if ex.inputs.len() != spec.extractors.len() {
        return Err(Error::invalid("example does not have one input per extractor"));
    }
    for (x, e) in ex.inputs.iter().zip(&spec.extractors) {
        if x.shape != e.input_shape {
            return Err(Error::invalid(format!("{} input has shape {:?}", e.modality.name(), x.shape)));
        }
    }
    if ex.label >= spec.class_count {
        return Err(Error::invalid(format!("label {} out of range", ex.label)));
    }
    Ok(())
}

/// Cross-entropy of one example; accumulates `scale`-weighted gradient.
fn example_loss_grad(
    params: &Parameters,
    spec: &ModelSpec,
    ex: &Example,
    scale: f64,
    grad: &mut [f64],
    mut dropout: Option<ChaCha8Rng>,
) -> Result<f64> {
    let (ext_ranges, fusion_range) = stack_ranges(spec);
    let values = &params.values;
    let mut ext_caches = Vec::with_capacity(ext_ranges.len());
    let mut fused = Vec::with_capacity(ext_ranges.len() * spec.latent_dim);
    for (range, x) in ext_ranges.iter().zip(&ex.inputs) {
        let mut cache = Vec::new();
        let z = forward_stack(&params.layout[range.clone()], values, x.data.clone(), dropout.as_mut(), Some(&mut cache))?;
        fused.extend_from_slice(&z);
        ext_caches.push(cache);
    }
    let fusion_layers = &params.layout[fusion_range];
    let mut fusion_cache = Vec::new();
    let logits = forward_stack(fusion_layers, values, fused, dropout.as_mut(), Some(&mut fusion_cache))?;

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[ex.label];
    let dlogits: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = (l - log_z).exp();
            scale * (s - if i == ex.label { 1.0 } else { 0.0 })
        })
        .collect();

    let dfused = backward_stack(fusion_layers, values, &fusion_cache, dlogits, grad, true);
    let d = spec.latent_dim;
    for (k, (range, cache)) in ext_ranges.iter().zip(&ext_caches).enumerate() {
        let dz = dfused[k * d..(k + 1) * d].to_vec();
        backward_stack(&params.layout[range.clone()], values, cache, dz, grad, false);
    }
    Ok(loss)
}

/// Mean cross-entropy plus ℓ1/ℓ2 penalties on dense kernels, and its gradient.
pub fn loss_and_grad(params: &Parameters, spec: &ModelSpec, batch: &[Example], cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    loss_and_grad_impl(params, spec, batch, cfg, None)
}

/// `dropout` = (seed, first stream id); sample `i` of the batch uses stream
/// `first + i`.
pub(crate) fn loss_and_grad_impl(
    params: &Parameters,
    spec: &ModelSpec,
    batch: &[Example],
    cfg: &TrainConfig,
    dropout: Option<(u64, u64)>,
) -> Result<(f64, Vec<f64>)> {
    check_params(params, spec)?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for ex in batch {
        check_example(spec, ex)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let n = params.len();
    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut grad = vec![0.0; n];
            let mut loss = 0.0;
            for (j, ex) in chunk.iter().enumerate() {
                let rng = dropout.map(|(seed, first)| rng::stream(seed, Purpose::Dropout, first + (ci * GRAD_CHUNK + j) as u64));
                loss += example_loss_grad(params, spec, ex, scale, &mut grad, rng)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut parts = partials.into_iter();
    let (mut loss, mut grad) = parts.next().expect("non-empty batch");
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    loss *= scale;

    if cfg.l1_dense > 0.0 || cfg.l2_dense > 0.0 {
        for l in &params.layout {
            for (g, w) in grad[l.weights.clone()].iter_mut().zip(&params.values[l.weights.clone()]) {
                loss += cfg.l1_dense * w.abs() + cfg.l2_dense * w * w;
                *g += cfg.l1_dense * w.signum() * (*w != 0.0) as u8 as f64 + 2.0 * cfg.l2_dense * w;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{ExtractorSpec, LayerSpec};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            latent_dim: 4,
            extractors: vec![ExtractorSpec {
                modality: Modality::Gps,
                input_shape: vec![2],
                layers: vec![LayerSpec::new(4, Activation::Tanh)],
            }],
            fusion_layers: vec![LayerSpec::new(4, Activation::Linear)],
            class_count: 4,
        }
    }

    #[test]
    fn zero_parameters_give_zero_latent_and_uniform_scores() {
        let spec = ModelSpec::desk_scale(&[(Modality::Gps, vec![2]), (Modality::Lidar, vec![3, 3])], 5);
        let p = Parameters::zeros(&spec).unwrap();
        let z = extract_features(&p, &spec, &Tensor::vector(vec![3.0, -1.0]), Modality::Gps).unwrap();
        assert_eq!(z.z, vec![0.0; 5]);
        let s = predict(&p, &spec, &[Tensor::vector(vec![1.0, 2.0]), Tensor::new(vec![3, 3], vec![1.0; 9]).unwrap()]).unwrap();
        assert!(s.s.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_single_layer_extractor() {
        let spec = tiny_spec();
        let mut p = Parameters::zeros(&spec).unwrap();
        let l = p.layout[0].clone();
        // w[i][o] input-major
        let w = [0.1, -0.2, 0.3, 0.0, 0.5, 0.25, -0.4, 1.0];
        p.values[l.weights.clone()].copy_from_slice(&w);
        p.values[l.biases.clone()].copy_from_slice(&[0.05, 0.0, -0.1, 0.2]);
        let x = [1.5, -2.0];
        let z = extract_features(&p, &spec, &Tensor::vector(x.to_vec()), Modality::Gps).unwrap();
        for o in 0..4 {
            let pre = p.values[l.biases.start + o] + x[0] * w[o] + x[1] * w[4 + o];
            assert!((z.z[o] - pre.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn latents_are_tanh_bounded() {
        let spec = ModelSpec::desk_scale(&[(Modality::Gps, vec![2])], 6);
        let mut p = Parameters::init(&spec, 5).unwrap();
        p.values.iter_mut().for_each(|v| *v *= 40.0);
        let z = extract_features(&p, &spec, &Tensor::vector(vec![100.0, -70.0]), Modality::Gps).unwrap();
        assert!(z.z.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = tiny_spec();
        let p = Parameters::zeros(&spec).unwrap();
        assert!(extract_features(&p, &spec, &Tensor::vector(vec![1.0; 3]), Modality::Gps).is_err());
        assert!(extract_features(&p, &spec, &Tensor::vector(vec![1.0; 2]), Modality::Lidar).is_err());
        let bad = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(fusion_forward(&p, &spec, &bad).is_err());
    }

    #[test]
    fn fuse_layout_and_order() {
        let e = |m, z: Vec<f64>| LatentEmbedding { modality: m, z };
        let t = fuse(&[e(Modality::Gps, vec![1.0, 2.0]), e(Modality::Lidar, vec![3.0, 4.0]), e(Modality::Image, vec![5.0, 6.0])]).unwrap();
        assert_eq!(t.shape, vec![3, 2]);
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
        let partial = fuse(&[e(Modality::Gps, vec![1.0, 2.0]), e(Modality::Lidar, vec![3.0, 4.0])]).unwrap();
        let img = fuse(&[e(Modality::Image, vec![5.0, 6.0])]).unwrap();
        assert_eq!(concat_rows(&partial, &img).unwrap(), t);
        assert!(fuse(&[e(Modality::Lidar, vec![1.0]), e(Modality::Gps, vec![1.0])]).is_err());
        assert!(fuse(&[e(Modality::Gps, vec![1.0]), e(Modality::Lidar, vec![1.0, 2.0])]).is_err());
    }

    fn set_logits(spec: &ModelSpec, bias: &[f64]) -> Parameters {
        let mut p = Parameters::zeros(spec).unwrap();
        let last = p.layout.last().unwrap().clone();
        p.values[last.biases].copy_from_slice(bias);
        p
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let spec = tiny_spec();
        let p = set_logits(&spec, &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let s = fusion_forward(&p, &spec, &z).unwrap();
        let denom: f64 = (1..=4).map(|k| (k as f64).exp()).sum();
        for k in 0..4 {
            assert!((s.s[k] - ((k + 1) as f64).exp() / denom).abs() < 1e-15);
        }
        let shifted = fusion_forward(&set_logits(&spec, &[101.0, 102.0, 103.0, 104.0]), &spec, &z).unwrap();
        for (a, b) in s.s.iter().zip(&shifted.s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_limits() {
        let spec = tiny_spec();
        let cfg = TrainConfig { l1_dense: 0.0, l2_dense: 0.0, ..TrainConfig::default() };
        let ex = Example { inputs: vec![Tensor::vector(vec![0.3, 0.1])], label: 2 };
        let (uniform, _) = loss_and_grad(&Parameters::zeros(&spec).unwrap(), &spec, std::slice::from_ref(&ex), &cfg).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        let (confident, _) = loss_and_grad(&set_logits(&spec, &[0.0, 0.0, 60.0, 0.0]), &spec, &[ex], &cfg).unwrap();
        assert!(confident < 1e-20);
    }

    #[test]
    fn regularizer_enters_loss() {
        let spec = tiny_spec();
        let p = Parameters::init(&spec, 2).unwrap();
        let ex = Example { inputs: vec![Tensor::vector(vec![0.3, 0.1])], label: 0 };
        let plain = TrainConfig { l1_dense: 0.0, l2_dense: 0.0, ..TrainConfig::default() };
        let reg = TrainConfig { l1_dense: 0.01, l2_dense: 0.1, ..TrainConfig::default() };
        let (a, _) = loss_and_grad(&p, &spec, std::slice::from_ref(&ex), &plain).unwrap();
        let (b, _) = loss_and_grad(&p, &spec, &[ex], &reg).unwrap();
        let penalty: f64 = p
            .layout
            .iter()
            .flat_map(|l| p.values[l.weights.clone()].iter())
            .map(|w| 0.01 * w.abs() + 0.1 * w * w)
            .sum();
        assert!((b - a - penalty).abs() < 1e-12);
    }

    #[test]
    fn bad_label_rejected() {
        let spec = tiny_spec();
        let p = Parameters::zeros(&spec).unwrap();
        let ex = Example { inputs: vec![Tensor::vector(vec![0.3, 0.1])], label: 9 };
        assert!(loss_and_grad(&p, &spec, &[ex], &TrainConfig::default()).is_err());
        assert!(loss_and_grad(&p, &spec, &[], &TrainConfig::default()).is_err());
    }
}
