//! Output-sensitivity importance weights and their post-processing.
//!
//! For every parameter the raw importance is the mean, over unlabeled
//! samples, of the absolute gradient of the squared L2 norm of the softmax
//! output. Raw maps go through a fixed pipeline before any strategy uses
//! them:
//!
//! 1. [`clip_outliers_iqr`]: pool all values network-wide and clamp them to
//!    the Tukey fences `Q1 - 1.5 IQR` and `Q3 + 1.5 IQR`.
//! 2. [`normalize_unit`]: global min-max scaling into `[0, 1]`.
//! 3. [`aggregate`] (optional): share one value per kernel or per filter.
//! 4. [`accumulate`]: uniform running mean over the domains seen so far.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{ParamStructure, ParameterStore, SegNet};
use crate::tensor::Tensor;

const IQR_FENCE: f64 = 1.5;

/// Level at which importance values are shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Parameter,
    Kernel,
    Filter,
}

impl Granularity {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Granularity::Parameter => 0,
            Granularity::Kernel => 1,
            Granularity::Filter => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Granularity::Parameter),
            1 => Some(Granularity::Kernel),
            2 => Some(Granularity::Filter),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceEntry {
    pub id: String,
    pub layer: String,
    pub structure: ParamStructure,
    pub values: Vec<f64>,
}

/// Nonnegative importance per scalar parameter, aligned with a
/// [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    entries: Vec<ImportanceEntry>,
    granularity: Granularity,
    normalized: bool,
    sample_count: usize,
    task_count: usize,
}

impl ImportanceMap {
    /// A map holding `value` everywhere.
    pub fn uniform(
        store: &ParameterStore,
        value: f64,
        granularity: Granularity,
        normalized: bool,
    ) -> Result<Self> {
        if !(value >= 0.0 && value.is_finite()) || (normalized && value > 1.0) {
            return Err(Error::Importance(format!("invalid uniform value {value}")));
        }
        Ok(Self {
            entries: store
                .entries()
                .iter()
                .map(|e| ImportanceEntry {
                    id: e.id.clone(),
                    layer: e.layer.clone(),
                    structure: e.structure,
                    values: vec![value; e.tensor.len()],
                })
                .collect(),
            granularity,
            normalized,
            sample_count: 0,
            task_count: 0,
        })
    }

    /// Builds a map from explicit per-parameter values in store order.
    pub fn from_values(
        store: &ParameterStore,
        values: Vec<Vec<f64>>,
        granularity: Granularity,
        normalized: bool,
        sample_count: usize,
        task_count: usize,
    ) -> Result<Self> {
        if values.len() != store.len() {
            return Err(Error::Importance(format!(
                "{} value arrays for {} parameters",
                values.len(),
                store.len()
            )));
        }
        let mut entries = Vec::with_capacity(values.len());
        for (e, v) in store.entries().iter().zip(values) {
            if v.len() != e.tensor.len() {
                return Err(Error::Importance(format!(
                    "{}: {} values for {} parameters",
                    e.id,
                    v.len(),
                    e.tensor.len()
                )));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Importance(format!(
                    "{}: negative or non-finite value",
                    e.id
                )));
            }
            if normalized && v.iter().any(|&x| x > 1.0) {
                return Err(Error::Importance(format!(
                    "{}: value above 1 in normalized map",
                    e.id
                )));
            }
            entries.push(ImportanceEntry {
                id: e.id.clone(),
                layer: e.layer.clone(),
                structure: e.structure,
                values: v,
            });
        }
        Ok(Self {
            entries,
            granularity,
            normalized,
            sample_count,
            task_count,
        })
    }

    pub fn entries(&self) -> &[ImportanceEntry] {
        &self.entries
    }

    pub fn values(&self, id: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.values.as_slice())
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Every value in store order.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.values.iter().copied())
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.entries.iter_mut().flat_map(|e| e.values.iter_mut())
    }

    /// Checks that the map lines up with `store`.
    pub fn check_aligned(&self, store: &ParameterStore) -> Result<()> {
        let mine: Vec<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        let theirs: Vec<&str> = store.ids().collect();
        if mine != theirs {
            return Err(Error::ParamMismatch {
                missing: theirs
                    .iter()
                    .filter(|i| !mine.contains(i))
                    .map(|s| s.to_string())
                    .collect(),
                extra: mine
                    .iter()
                    .filter(|i| !theirs.contains(i))
                    .map(|s| s.to_string())
                    .collect(),
            });
        }
        for (e, p) in self.entries.iter().zip(store.entries()) {
            if e.values.len() != p.tensor.len() {
                return Err(Error::Importance(format!("{}: length mismatch", e.id)));
            }
        }
        Ok(())
    }

    pub(crate) fn with_counts(mut self, sample_count: usize, task_count: usize) -> Self {
        self.sample_count = sample_count;
        self.task_count = task_count;
        self
    }

    /// Relabels the granularity without touching values.
    pub fn relabel(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }
}

/// Raw importance of `net` over `samples`, each `[N, C, H, W]`; every image
/// counts as one sample.
pub fn compute_raw_importance(net: &SegNet, samples: &[Tensor]) -> Result<ImportanceMap> {
    raw_importance_with(net.params(), samples, |g, x, vars| {
        net.forward(g, x, vars, None)
    })
}

/// Raw importance for any model whose logits `[N, C, H, W]` are recorded by
/// `logits` from an input handle and the bound parameters of `store`.
pub fn raw_importance_with<F>(
    store: &ParameterStore,
    samples: &[Tensor],
    logits: F,
) -> Result<ImportanceMap>
where
    F: Fn(&mut Graph, Var, &[Var]) -> Result<Var>,
{
    let mut totals: Vec<Vec<f64>> = store
        .entries()
        .iter()
        .map(|e| vec![0.0; e.tensor.len()])
        .collect();
    let mut count = 0usize;
    for batch in samples {
        let shape = batch.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "importance",
                format!("expected [N, C, H, W], got {shape:?}"),
            ));
        }
        let per = batch.len() / shape[0];
        for image in batch.data().chunks_exact(per) {
            let x = Tensor::new(vec![1, shape[1], shape[2], shape[3]], image.to_vec())?;
            let mut g = Graph::new();
            let vars = store.bind(&mut g, true)?;
            let xv = g.constant(x)?;
            let out = logits(&mut g, xv, &vars)?;
            let probs = g.softmax_channel(out)?;
            let norm = g.l2_squared_norm(probs)?;
            let grads = g.backward(norm)?;
            for ((total, var), e) in totals.iter_mut().zip(&vars).zip(store.entries()) {
                let grad = grads.get(*var).expect("bound as parameter");
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(e.id.clone()));
                }
                for (t, gv) in total.iter_mut().zip(grad) {
                    *t += gv.abs();
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Importance("no samples".into()));
    }
    let inv = 1.0 / count as f64;
    for t in totals.iter_mut().flatten() {
        *t *= inv;
    }
    ImportanceMap::from_values(store, totals, Granularity::Parameter, false, count, 0)
}

/// Quantile of a sorted slice by linear interpolation between order
/// statistics (position `q * (n - 1)`).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clamps network-wide outliers to the interquartile-range fences.
pub fn clip_outliers_iqr(map: &ImportanceMap) -> Result<ImportanceMap> {
    if map.granularity != Granularity::Parameter || map.normalized {
        return Err(Error::Importance(
            "outlier clipping expects a raw per-parameter map".into(),
        ));
    }
    let mut pool: Vec<f64> = map.flat().collect();
    if pool.len() < 4 {
        log::warn!(
            "importance map has {} values; skipping outlier clipping",
            pool.len()
        );
        return Ok(map.clone());
    }
    pool.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&pool, 0.25);
    let q3 = quantile_sorted(&pool, 0.75);
    let iqr = q3 - q1;
    let upper = q3 + IQR_FENCE * iqr;
    let lower = (q1 - IQR_FENCE * iqr).max(0.0);
    let mut out = map.clone();
    for v in out.flat_mut() {
        *v = v.clamp(lower, upper);
    }
    Ok(out)
}

/// Global min-max normalization into `[0, 1]`. A constant map becomes all
/// zeros.
pub fn normalize_unit(map: &ImportanceMap) -> ImportanceMap {
    let (min, max) = map
        .flat()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let mut out = map.clone();
    let range = max - min;
    for v in out.flat_mut() {
        *v = if range > 0.0 {
            ((*v - min) / range).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    out.normalized = true;
    out
}

fn fill_mean(block: &mut [f64]) {
    let mean = block.iter().sum::<f64>() / block.len() as f64;
    block.fill(mean);
}

/// Replaces every kernel or filter block with its arithmetic mean.
///
/// Kernel blocks are the `kh x kw` slices of one `(out, in)` channel pair;
/// each bias element is its own block. Filter blocks are all weights of one
/// output channel together with that channel's bias entry.
pub fn aggregate(map: &ImportanceMap, granularity: Granularity) -> Result<ImportanceMap> {
    if map.granularity != Granularity::Parameter {
        return Err(Error::Importance(format!(
            "map is already aggregated at {:?} level",
            map.granularity
        )));
    }
    let mut out = map.clone();
    out.granularity = granularity;
    match granularity {
        Granularity::Parameter => {}
        Granularity::Kernel => {
            for e in &mut out.entries {
                if let ParamStructure::Conv {
                    kernel_h, kernel_w, ..
                } = e.structure
                {
                    e.values
                        .chunks_exact_mut(kernel_h * kernel_w)
                        .for_each(fill_mean);
                }
            }
        }
        Granularity::Filter => {
            let n = out.entries.len();
            let mut handled = vec![false; n];
            for i in 0..n {
                let ParamStructure::Conv { out_channels, .. } = out.entries[i].structure else {
                    continue;
                };
                handled[i] = true;
                let bias = (0..n).find(|&j| {
                    j != i
                        && out.entries[j].layer == out.entries[i].layer
                        && out.entries[j].structure == ParamStructure::Bias { len: out_channels }
                });
                let per = out.entries[i].values.len() / out_channels;
                for o in 0..out_channels {
                    let mut sum: f64 = out.entries[i].values[o * per..(o + 1) * per].iter().sum();
                    let mut size = per;
                    if let Some(j) = bias {
                        sum += out.entries[j].values[o];
                        size += 1;
                    }
                    let mean = sum / size as f64;
                    out.entries[i].values[o * per..(o + 1) * per].fill(mean);
                    if let Some(j) = bias {
                        out.entries[j].values[o] = mean;
                    }
                }
                if let Some(j) = bias {
                    handled[j] = true;
                }
            }
            debug_assert!(handled
                .iter()
                .zip(&out.entries)
                .all(|(h, e)| *h || matches!(e.structure, ParamStructure::Bias { .. })));
        }
    }
    Ok(out)
}

/// Running uniform mean over tasks. `task_index` is 1-based.
pub fn accumulate(
    running: Option<&ImportanceMap>,
    fresh: &ImportanceMap,
    task_index: usize,
) -> Result<ImportanceMap> {
    if !fresh.normalized {
        return Err(Error::Importance("fresh map must be normalized".into()));
    }
    if task_index == 0 {
        return Err(Error::Importance("task index is 1-based".into()));
    }
    let Some(run) = running else {
        if task_index != 1 {
            return Err(Error::Importance(format!(
                "no running map for task {task_index}"
            )));
        }
        return Ok(fresh.clone().with_counts(fresh.sample_count, 1));
    };
    if run.task_count != task_index - 1 {
        return Err(Error::Importance(format!(
            "running map covers {} tasks, expected {}",
            run.task_count,
            task_index - 1
        )));
    }
    if run.granularity != fresh.granularity {
        return Err(Error::Importance(format!(
            "granularity mismatch: running {:?}, fresh {:?}",
            run.granularity, fresh.granularity
        )));
    }
    let ids_match = run.entries.len() == fresh.entries.len()
        && run
            .entries
            .iter()
            .zip(&fresh.entries)
            .all(|(a, b)| a.id == b.id && a.values.len() == b.values.len());
    if !ids_match {
        return Err(Error::Importance(
            "parameter ids differ between maps".into(),
        ));
    }
    let prev = (task_index - 1) as f64;
    let t = task_index as f64;
    let mut out = run.clone();
    for (o, f) in out.entries.iter_mut().zip(&fresh.entries) {
        for (ov, fv) in o.values.iter_mut().zip(&f.values) {
            *ov = ((prev * *ov + fv) / t).clamp(0.0, 1.0);
        }
    }
    out.task_count = task_index;
    out.sample_count = run.sample_count + fresh.sample_count;
    Ok(out)
}

/// Clip, normalize and optionally aggregate a raw map.
pub fn postprocess(raw: &ImportanceMap, granularity: Granularity) -> Result<ImportanceMap> {
    let clipped = clip_outliers_iqr(raw)?;
    let normalized = normalize_unit(&clipped);
    aggregate(&normalized, granularity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::SegNetConfig;

    fn flat_store(values: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.push(
            "w",
            "w",
            ParamStructure::Bias { len: values.len() },
            Tensor::from_vec(vec![0.0; values.len()]),
        )
        .unwrap();
        s
    }

    fn flat_map(values: &[f64]) -> ImportanceMap {
        ImportanceMap::from_values(
            &flat_store(values),
            vec![values.to_vec()],
            Granularity::Parameter,
            false,
            1,
            0,
        )
        .unwrap()
    }

    fn conv_store() -> ParameterStore {
        // One layer: 2 output channels, 2 input channels, 2x2 kernels.
        let mut s = ParameterStore::new();
        s.push(
            "c.weight",
            "c",
            ParamStructure::Conv {
                out_channels: 2,
                in_channels: 2,
                kernel_h: 2,
                kernel_w: 2,
            },
            Tensor::zeros(&[2, 2, 2, 2]),
        )
        .unwrap();
        s.push(
            "c.bias",
            "c",
            ParamStructure::Bias { len: 2 },
            Tensor::zeros(&[2]),
        )
        .unwrap();
        s
    }

    #[test]
    fn iqr_clip_hand_example() {
        let out = clip_outliers_iqr(&flat_map(&[0.0, 1.0, 2.0, 3.0, 100.0])).unwrap();
        assert_eq!(out.values("w").unwrap(), &[0.0, 1.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn iqr_clip_noops() {
        let same = flat_map(&[0.7; 6]);
        assert_eq!(clip_outliers_iqr(&same).unwrap(), same);
        let tame = flat_map(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(clip_outliers_iqr(&tame).unwrap(), tame);
        let tiny = flat_map(&[0.0, 1000.0, 1.0]);
        assert_eq!(clip_outliers_iqr(&tiny).unwrap(), tiny);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_unit(&flat_map(&[2.0, 4.0, 6.0]));
        assert_eq!(n.values("w").unwrap(), &[0.0, 0.5, 1.0]);
        assert!(n.is_normalized());
        let c = normalize_unit(&flat_map(&[3.0, 3.0]));
        assert_eq!(c.values("w").unwrap(), &[0.0, 0.0]);
        let e = normalize_unit(&flat_map(&[0.0, 10.0]));
        assert_eq!(e.values("w").unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn kernel_block_mean() {
        let store = conv_store();
        let mut w = vec![0.2, 0.4, 0.6, 0.8];
        w.extend([0.1; 12]);
        let map = ImportanceMap::from_values(
            &store,
            vec![w, vec![0.3, 0.9]],
            Granularity::Parameter,
            true,
            1,
            0,
        )
        .unwrap();
        let k = aggregate(&map, Granularity::Kernel).unwrap();
        let kv = k.values("c.weight").unwrap();
        for v in &kv[..4] {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert_eq!(k.values("c.bias").unwrap(), &[0.3, 0.9]);
    }

    #[test]
    fn filter_mean_of_two_kernels() {
        let store = conv_store();
        // Out channel 0: kernels with means 0.3 and 0.7, bias entry 0.5.
        let mut w = vec![0.3, 0.3, 0.3, 0.3, 0.6, 0.8, 0.7, 0.7];
        w.extend([0.0; 8]);
        let map = ImportanceMap::from_values(
            &store,
            vec![w.clone(), vec![0.5, 0.0]],
            Granularity::Parameter,
            true,
            1,
            0,
        )
        .unwrap();
        let f = aggregate(&map, Granularity::Filter).unwrap();
        // Direct pooled average over the 9 members of filter 0.
        let pooled = (w[..8].iter().sum::<f64>() + 0.5) / 9.0;
        assert!((pooled - 0.5).abs() < 1e-15);
        for v in &f.values("c.weight").unwrap()[..8] {
            assert!((v - pooled).abs() < 1e-15);
        }
        assert!((f.values("c.bias").unwrap()[0] - pooled).abs() < 1e-15);
        assert_eq!(f.values("c.bias").unwrap()[1], 0.0);
    }

    #[test]
    fn double_aggregation_rejected() {
        let map = ImportanceMap::uniform(&conv_store(), 0.4, Granularity::Parameter, true).unwrap();
        let k = aggregate(&map, Granularity::Kernel).unwrap();
        assert_eq!(
            k.values("c.weight").unwrap(),
            map.values("c.weight").unwrap()
        );
        assert!(aggregate(&k, Granularity::Filter).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let store = flat_store(&[0.0]);
        let a =
            ImportanceMap::from_values(&store, vec![vec![0.4]], Granularity::Parameter, true, 1, 0)
                .unwrap();
        let b =
            ImportanceMap::from_values(&store, vec![vec![0.8]], Granularity::Parameter, true, 1, 0)
                .unwrap();
        let r1 = accumulate(None, &a, 1).unwrap();
        assert_eq!(r1.values("w").unwrap(), &[0.4]);
        assert_eq!(r1.task_count(), 1);
        let r2 = accumulate(Some(&r1), &b, 2).unwrap();
        assert!((r2.values("w").unwrap()[0] - 0.6).abs() < 1e-15);
        let r3 = accumulate(Some(&r2), &r2.clone().with_counts(1, 0), 3).unwrap();
        assert!((r3.values("w").unwrap()[0] - 0.6).abs() < 1e-15);
        // Wrong task index or granularity.
        assert!(accumulate(Some(&r1), &b, 3).is_err());
        assert!(accumulate(Some(&r1), &b.clone().relabel(Granularity::Kernel), 2).is_err());
        assert!(accumulate(None, &flat_map(&[0.5]), 1).is_err());
    }

    #[test]
    fn raw_importance_basics() {
        let net = SegNet::build(
            SegNetConfig {
                encoder_channels: vec![2],
                bottleneck_channels: 3,
                ..Default::default()
            },
            11,
        )
        .unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        let one = compute_raw_importance(&net, std::slice::from_ref(&x)).unwrap();
        let two = compute_raw_importance(&net, &[x.clone(), x.clone()]).unwrap();
        assert_eq!(one.sample_count(), 1);
        assert_eq!(two.sample_count(), 2);
        for (a, b) in one.flat().zip(two.flat()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            assert!(a >= 0.0);
        }
        assert!(compute_raw_importance(&net, &[]).is_err());
    }

    fn one_param_omega(theta: f64) -> f64 {
        let mut store = ParameterStore::new();
        store
            .push(
                "theta",
                "theta",
                ParamStructure::Bias { len: 1 },
                Tensor::from_vec(vec![theta]),
            )
            .unwrap();
        let x = Tensor::full(&[1, 1, 1, 1], 1.0);
        let map = raw_importance_with(&store, &[x], |g, input, vars| {
            // logits per pixel: [theta * x, 0]
            let xin = g.reshape(input, &[1, 1])?;
            let th = g.reshape(vars[0], &[1, 1])?;
            let a = g.matmul(xin, th)?;
            let e = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0])?)?;
            let l = g.matmul(a, e)?;
            g.reshape(l, &[1, 2, 1, 1])
        })
        .unwrap();
        map.values("theta").unwrap()[0]
    }

    #[test]
    fn one_parameter_logit_net() {
        assert_eq!(one_param_omega(0.0), 0.0);
        // Oracle: central difference of theta -> s(theta)^2 + s(-theta)^2.
        let s = |t: f64| 1.0 / (1.0 + (-t).exp());
        let f = |t: f64| s(t).powi(2) + s(-t).powi(2);
        let h = 1e-6;
        let fd = ((f(1.0 + h) - f(1.0 - h)) / (2.0 * h)).abs();
        assert!(
            (one_param_omega(1.0) - fd).abs() < 1e-8,
            "{} vs {fd}",
            one_param_omega(1.0)
        );
    }

    #[test]
    fn dead_relu_path_has_zero_importance() {
        let mut net = SegNet::build(
            SegNetConfig {
                encoder_channels: vec![2],
                bottleneck_channels: 3,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        for e in net.params_mut().entries_mut() {
            if e.id == "enc0.bias" {
                e.tensor.data_mut()[0] = -100.0;
            }
        }
        let x = Tensor::full(&[1, 1, 8, 8], 0.5);
        let map = compute_raw_importance(&net, &[x]).unwrap();
        assert_eq!(map.values("enc0.bias").unwrap()[0], 0.0);
        assert!(map.values("enc0.weight").unwrap()[..9]
            .iter()
            .all(|&v| v == 0.0));
        assert!(map.values("enc0.weight").unwrap()[9..]
            .iter()
            .any(|&v| v > 0.0));
    }
}
