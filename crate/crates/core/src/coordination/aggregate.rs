//! Depth-aware client aggregation and FedAvg of the server back end.

use std::collections::BTreeMap;

use crate::client::ClientModel;
use crate::nn::{Head, ParamBlock, Tensor};
use crate::server::ServerState;

use super::CoordError;

fn normalized(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 && total.is_finite() {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// `x₀ + Σᵢ wᵢ (xᵢ − x₀)` with `w` normalized: the weighted mean, exact when
/// every input is identical.
pub fn weighted_mean(items: &[&Tensor], weights: &[f64]) -> Tensor {
    let w = normalized(weights);
    let base = items[0];
    let mut out = base.clone();
    for (x, wi) in items.iter().zip(&w).skip(1) {
        out.axpy(*wi, &x.sub(base));
    }
    out
}

fn mix(own: &Tensor, avg: &Tensor, lambda: f64) -> Tensor {
    if lambda == 0.0 {
        avg.clone()
    } else if lambda == 1.0 {
        own.clone()
    } else {
        let mut out = avg.scale(1.0 - lambda);
        out.axpy(lambda, own);
        out
    }
}

fn mean_block(blocks: &[&ParamBlock], weights: &[f64]) -> Result<ParamBlock, CoordError> {
    let first = blocks[0];
    if let Some(b) = blocks.iter().find(|b| b.dims() != first.dims()) {
        return Err(CoordError::Aggregation(format!(
            "depth {}: shapes {:?} and {:?} disagree",
            first.depth,
            first.dims(),
            b.dims()
        )));
    }
    let w: Vec<&Tensor> = blocks.iter().map(|b| &b.weights).collect();
    let bias: Vec<&Tensor> = blocks.iter().map(|b| &b.bias).collect();
    Ok(ParamBlock {
        depth: first.depth,
        weights: weighted_mean(&w, weights),
        bias: weighted_mean(&bias, weights),
    })
}

fn mean_head(heads: &[&Head], weights: &[f64]) -> Result<Head, CoordError> {
    let first = heads[0];
    if let Some(h) = heads
        .iter()
        .find(|h| h.weights.shape() != first.weights.shape())
    {
        return Err(CoordError::Aggregation(format!(
            "head shapes {:?} and {:?} disagree",
            first.weights.shape(),
            h.weights.shape()
        )));
    }
    let w: Vec<&Tensor> = heads.iter().map(|h| &h.weights).collect();
    let bias: Vec<&Tensor> = heads.iter().map(|h| &h.bias).collect();
    Ok(Head {
        weights: weighted_mean(&w, weights),
        bias: weighted_mean(&bias, weights),
    })
}

/// New client-side models after a round.
///
/// For every depth `d`, the participants holding a block at `d` are
/// averaged with their `ζ` renormalized over that subset; heads are averaged
/// among participants sharing a split depth. Every client, participating or
/// not, then takes `λ·own + (1−λ)·average` wherever an average exists and
/// keeps its own parameters elsewhere.
pub fn aggregate_clients(
    models: &[ClientModel],
    participating: &[bool],
    zeta: &[f64],
    lambda: f64,
) -> Result<Vec<ClientModel>, CoordError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoordError::Param {
            key: "lambda",
            reason: format!("{lambda} outside [0, 1]"),
        });
    }
    if models.len() != participating.len() || models.len() != zeta.len() {
        return Err(CoordError::Aggregation(format!(
            "{} models, {} participation flags, {} weights",
            models.len(),
            participating.len(),
            zeta.len()
        )));
    }
    for (i, m) in models.iter().enumerate() {
        if m.prefix.iter().enumerate().any(|(j, b)| b.depth != j + 1) {
            return Err(CoordError::Aggregation(format!(
                "client {i} prefix is not contiguous from depth 1"
            )));
        }
    }
    let contributors: Vec<usize> = (0..models.len()).filter(|&i| participating[i]).collect();
    let max_depth = models.iter().map(|m| m.prefix.len()).max().unwrap_or(0);

    let mut block_avg: Vec<Option<ParamBlock>> = vec![None; max_depth + 1];
    for (d, slot) in block_avg.iter_mut().enumerate().skip(1) {
        let holders: Vec<usize> = contributors
            .iter()
            .copied()
            .filter(|&i| models[i].prefix.len() >= d)
            .collect();
        if holders.is_empty() {
            continue;
        }
        let blocks: Vec<&ParamBlock> = holders.iter().map(|&i| &models[i].prefix[d - 1]).collect();
        let w: Vec<f64> = holders.iter().map(|&i| zeta[i]).collect();
        *slot = Some(mean_block(&blocks, &w)?);
    }

    let mut by_split: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &contributors {
        by_split.entry(models[i].split_depth()).or_default().push(i);
    }
    let mut head_avg: BTreeMap<usize, Head> = BTreeMap::new();
    for (split, holders) in by_split {
        let heads: Vec<&Head> = holders.iter().map(|&i| &models[i].head).collect();
        let w: Vec<f64> = holders.iter().map(|&i| zeta[i]).collect();
        head_avg.insert(split, mean_head(&heads, &w)?);
    }

    models
        .iter()
        .enumerate()
        .map(|(i, own)| {
            let prefix = own
                .prefix
                .iter()
                .map(|b| match &block_avg[b.depth] {
                    Some(avg) if avg.dims() != b.dims() => Err(CoordError::Aggregation(format!(
                        "client {i} depth {}: own shape {:?} vs average {:?}",
                        b.depth,
                        b.dims(),
                        avg.dims()
                    ))),
                    Some(avg) => Ok(ParamBlock {
                        depth: b.depth,
                        weights: mix(&b.weights, &avg.weights, lambda),
                        bias: mix(&b.bias, &avg.bias, lambda),
                    }),
                    None => Ok(b.clone()),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let head = match head_avg.get(&own.split_depth()) {
                Some(avg) if avg.weights.shape() == own.head.weights.shape() => Head {
                    weights: mix(&own.head.weights, &avg.weights, lambda),
                    bias: mix(&own.head.bias, &avg.bias, lambda),
                },
                Some(_) => {
                    return Err(CoordError::Aggregation(format!(
                        "client {i} head shape differs"
                    )));
                }
                None => own.head.clone(),
            };
            Ok(ClientModel {
                prefix,
                head,
                activation: own.activation,
            })
        })
        .collect()
}

/// `θ^{r+1} = Σ ζᵢ θᵢ` over the participants' duplicates, `ζ` renormalized.
pub fn aggregate_server(
    duplicates: &[ServerState],
    weights: &[f64],
) -> Result<(Vec<ParamBlock>, Head), CoordError> {
    if duplicates.is_empty() || duplicates.len() != weights.len() {
        return Err(CoordError::Aggregation(format!(
            "{} server duplicates with {} weights",
            duplicates.len(),
            weights.len()
        )));
    }
    let first = &duplicates[0];
    if duplicates
        .iter()
        .any(|s| s.trunk.len() != first.trunk.len())
    {
        return Err(CoordError::Aggregation("server trunk depth drift".into()));
    }
    let trunk = (0..first.trunk.len())
        .map(|j| {
            let blocks: Vec<&ParamBlock> = duplicates.iter().map(|s| &s.trunk[j]).collect();
            mean_block(&blocks, weights)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let heads: Vec<&Head> = duplicates.iter().map(|s| &s.head).collect();
    Ok((trunk, mean_head(&heads, weights)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn scalar_block(depth: usize, v: f64) -> ParamBlock {
        ParamBlock {
            depth,
            weights: Tensor::matrix(1, 1, vec![v]),
            bias: Tensor::vector(vec![v]),
        }
    }

    fn scalar_head(v: f64) -> Head {
        Head {
            weights: Tensor::matrix(1, 1, vec![v]),
            bias: Tensor::vector(vec![v]),
        }
    }

    fn model(values: &[f64], head: f64) -> ClientModel {
        ClientModel {
            prefix: values
                .iter()
                .enumerate()
                .map(|(i, &v)| scalar_block(i + 1, v))
                .collect(),
            head: scalar_head(head),
            activation: Activation::Relu,
        }
    }

    #[test]
    fn lambda_one_keeps_own_params() {
        let models = vec![model(&[1.0, -0.0], 2.0), model(&[3.0, 5.0], 7.0)];
        let out = aggregate_clients(&models, &[true, true], &[0.5, 0.5], 1.0).unwrap();
        assert_eq!(out, models);
        assert!(out[0].prefix[1].weights.data()[0].is_sign_negative());
    }

    #[test]
    fn lambda_zero_is_plain_average() {
        let models = vec![model(&[1.0], 1.0), model(&[3.0], 3.0)];
        let out = aggregate_clients(&models, &[true, true], &[0.5, 0.5], 0.0).unwrap();
        for m in &out {
            assert_eq!(m.prefix[0].weights.data(), &[2.0]);
            assert_eq!(m.head.bias.data(), &[2.0]);
        }
    }

    #[test]
    fn lambda_mixes_own_and_average() {
        let models = vec![model(&[1.0], 1.0), model(&[3.0], 3.0)];
        let out = aggregate_clients(&models, &[true, true], &[0.5, 0.5], 0.25).unwrap();
        assert!((out[0].prefix[0].weights.data()[0] - (0.25 * 1.0 + 0.75 * 2.0)).abs() < 1e-15);
        assert!((out[1].prefix[0].weights.data()[0] - (0.25 * 3.0 + 0.75 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn deeper_block_averages_over_holders_only() {
        let a = model(&[1.0, 9.0], 4.0);
        let b = model(&[3.0], 6.0);
        let out = aggregate_clients(&[a.clone(), b], &[true, true], &[0.3, 0.7], 0.0).unwrap();
        assert_eq!(out[0].prefix[1], a.prefix[1]);
        assert!((out[0].prefix[0].weights.data()[0] - (0.3 + 0.7 * 3.0)).abs() < 1e-15);
        assert_eq!(out[0].prefix[0], out[1].prefix[0]);
        assert_eq!(out[0].head, a.head);
        assert_eq!(out[1].head, scalar_head(6.0));
    }

    #[test]
    fn non_participants_follow_the_average() {
        let models = vec![
            model(&[1.0], 1.0),
            model(&[3.0], 3.0),
            model(&[100.0], 100.0),
        ];
        let out =
            aggregate_clients(&models, &[true, true, false], &[0.25, 0.25, 0.5], 0.0).unwrap();
        assert_eq!(out[2].prefix[0].weights.data(), &[2.0]);
    }

    #[test]
    fn depth_without_participants_is_kept() {
        let models = vec![model(&[1.0], 1.0), model(&[3.0, 8.0], 3.0)];
        let out = aggregate_clients(&models, &[true, false], &[0.5, 0.5], 0.0).unwrap();
        assert_eq!(out[1].prefix[1], models[1].prefix[1]);
        assert_eq!(out[1].prefix[0].weights.data(), &[1.0]);
    }

    #[test]
    fn shape_drift_is_an_error() {
        let mut b = model(&[3.0], 3.0);
        b.prefix[0].weights = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        b.prefix[0].bias = Tensor::vector(vec![0.0, 0.0]);
        let err = aggregate_clients(&[model(&[1.0], 1.0), b], &[true, true], &[0.5, 0.5], 0.0);
        assert!(matches!(err, Err(CoordError::Aggregation(_))));
    }

    #[test]
    fn non_contiguous_prefix_is_an_error() {
        let mut a = model(&[1.0, 2.0], 1.0);
        a.prefix.remove(0);
        assert!(aggregate_clients(&[a], &[true], &[1.0], 0.0).is_err());
    }

    fn server(v: f64) -> ServerState {
        ServerState::from_parts(
            vec![scalar_block(2, v)],
            scalar_head(v),
            Activation::Relu,
            1.0,
        )
    }

    #[test]
    fn server_fedavg_arithmetic() {
        let (trunk, head) = aggregate_server(&[server(0.0), server(4.0)], &[0.25, 0.75]).unwrap();
        assert_eq!(trunk[0].weights.data(), &[3.0]);
        assert_eq!(head.bias.data(), &[3.0]);
    }

    #[test]
    fn server_single_and_identical_duplicates() {
        let s = server(0.1234567);
        let (trunk, head) = aggregate_server(std::slice::from_ref(&s), &[0.3]).unwrap();
        assert_eq!(trunk, s.trunk);
        assert_eq!(head, s.head);
        let (trunk, head) =
            aggregate_server(&[s.clone(), s.clone(), s.clone()], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(trunk, s.trunk);
        assert_eq!(head, s.head);
    }

    #[test]
    fn server_shape_drift_is_an_error() {
        let mut b = server(1.0);
        b.trunk[0].weights = Tensor::matrix(1, 2, vec![0.0; 2]);
        b.trunk[0].bias = Tensor::vector(vec![0.0; 2]);
        assert!(aggregate_server(&[server(1.0), b], &[0.5, 0.5]).is_err());
        assert!(aggregate_server(&[], &[]).is_err());
    }
}
