use std::sync::Arc;

use crate::autograd::{Graph, ModulationBasis};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamSet};
use crate::tensor::{Scalar, Tensor};

use super::nets::LayerVars;

/// Guard on per-filter standard deviations.
pub const SIGMA_EPS: f64 = 1e-8;

impl<T: Scalar> ModulationBasis<T> {
    /// Per-filter mean and population standard deviation over the kernel taps.
    pub fn from_base(base: &Tensor<T>) -> Result<Self> {
        let (c_out, c_in, kh, kw) = base.dims4()?;
        let taps = kh * kw;
        let n = T::of(taps as f64);
        let mut centered = Vec::with_capacity(base.numel());
        let mut sigma = Vec::with_capacity(c_out * c_in);
        let mut mu = Vec::with_capacity(c_out * c_in);
        for filter in base.data().chunks(taps) {
            let m = filter.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = filter.iter().fold(T::zero(), |a, &w| a + (w - m) * (w - m)) / n;
            centered.extend(filter.iter().map(|&w| w - m));
            sigma.push(var.sqrt().max(T::of(SIGMA_EPS)));
            mu.push(m);
        }
        Ok(Self { base: base.clone(), centered, sigma, mu })
    }
}

/// Style parameters `(alpha, beta, gamma)` for every conv layer of one network.
///
/// Stored as a flat [`ParamSet`] named `{layer}.alpha`, `{layer}.beta`,
/// `{layer}.gamma`, so it shares the checkpoint format with base weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleParams<T> {
    pub params: ParamSet<T>,
}

impl<T: Scalar> StyleParams<T> {
    /// Identity start: `alpha = sigma`, `beta = mu`, `gamma = 0`.
    pub fn identity(base: &ParamSet<T>) -> Result<Self> {
        let mut params = ParamSet::new();
        for (layer, w, _) in conv_layers(base)? {
            let basis = ModulationBasis::from_base(w)?;
            let (c_out, c_in, _, _) = w.dims4()?;
            params.push(format!("{layer}.alpha"), Tensor::new(&[c_out, c_in], basis.sigma)?);
            params.push(format!("{layer}.beta"), Tensor::new(&[c_out, c_in], basis.mu)?);
            params.push(format!("{layer}.gamma"), Tensor::zeros(&[c_out]));
        }
        Ok(Self { params })
    }

    pub fn layers(&self) -> usize {
        self.params.len() / 3
    }

    /// Checks one `(alpha, beta, gamma)` triple per base conv layer with matching shapes.
    pub fn check_against(&self, base: &ParamSet<T>) -> Result<()> {
        let layers = conv_layers(base)?;
        if layers.len() * 3 != self.params.len() {
            return Err(Error::Validation(format!(
                "{} style tensors for {} conv layers",
                self.params.len(),
                layers.len()
            )));
        }
        for (l, (name, w, _)) in layers.iter().enumerate() {
            let (c_out, c_in, _, _) = w.dims4()?;
            let t = &self.params.tensors()[3 * l..3 * l + 3];
            let names = &self.params.names()[3 * l..3 * l + 3];
            if names[0] != format!("{name}.alpha")
                || t[0].shape() != [c_out, c_in]
                || t[1].shape() != [c_out, c_in]
                || t[2].shape() != [c_out]
            {
                return Err(Error::Validation(format!("style parameters do not fit layer {name}")));
            }
        }
        Ok(())
    }
}

/// `(layer name, weight, bias)` for each `X.weight`/`X.bias` pair.
pub(crate) fn conv_layers<T: Scalar>(base: &ParamSet<T>) -> Result<Vec<(String, &Tensor<T>, &Tensor<T>)>> {
    let names = base.names();
    let tensors = base.tensors();
    if names.len() % 2 != 0 {
        return Err(Error::Validation("conv parameter set must hold weight/bias pairs".into()));
    }
    let mut out = Vec::with_capacity(names.len() / 2);
    for i in (0..names.len()).step_by(2) {
        let layer = names[i]
            .strip_suffix(".weight")
            .filter(|l| names[i + 1] == format!("{l}.bias"))
            .ok_or_else(|| Error::Validation(format!("unexpected parameter {}", names[i])))?;
        out.push((layer.to_string(), &tensors[i], &tensors[i + 1]));
    }
    Ok(out)
}

/// Applies style modulation to one layer: `W = alpha ⊙ (W_B - mu)/sigma + beta`, `b = b_B + gamma`.
pub fn modulate<T: Scalar>(
    base: (&Tensor<T>, &Tensor<T>),
    style: (&Tensor<T>, &Tensor<T>, &Tensor<T>),
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (w_b, b_b) = base;
    let (alpha, beta, gamma) = style;
    let (c_out, c_in, _, _) = w_b.dims4()?;
    if alpha.shape() != [c_out, c_in] || beta.shape() != [c_out, c_in] {
        return Err(Error::Validation(format!(
            "style shapes {:?}/{:?} for a {c_out}x{c_in} layer",
            alpha.shape(),
            beta.shape()
        )));
    }
    if b_b.numel() != c_out || gamma.numel() != c_out {
        return Err(Error::Validation(format!(
            "bias/gamma sizes {}/{} for {c_out} output channels",
            b_b.numel(),
            gamma.numel()
        )));
    }
    let basis = Arc::new(ModulationBasis::from_base(w_b)?);
    let mut g = Graph::new();
    let a = g.constant(alpha.clone());
    let b = g.constant(beta.clone());
    let w = g.modulate(a, b, basis)?;
    let bias = b_b.data().iter().zip(gamma.data()).map(|(&x, &y)| x + y).collect();
    Ok((g.value(w).clone(), Tensor::new(b_b.shape(), bias)?))
}

/// Cached statistics of a frozen conv network.
#[derive(Clone, Debug)]
pub struct ModulatedNet<T> {
    bases: Vec<Arc<ModulationBasis<T>>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Scalar> ModulatedNet<T> {
    pub fn new(base: &ParamSet<T>) -> Result<Self> {
        let mut bases = Vec::new();
        let mut biases = Vec::new();
        for (_, w, b) in conv_layers(base)? {
            bases.push(Arc::new(ModulationBasis::from_base(w)?));
            biases.push(b.clone());
        }
        Ok(Self { bases, biases })
    }

    /// Builds modulated `(weight, bias)` nodes from bound style parameters.
    pub fn layer_vars(&self, g: &mut Graph<T>, style: &Bound) -> Result<LayerVars> {
        if style.vars.len() != 3 * self.bases.len() {
            return Err(Error::Validation(format!(
                "{} style tensors for {} conv layers",
                style.vars.len(),
                self.bases.len()
            )));
        }
        let mut out = Vec::with_capacity(self.bases.len());
        for (l, (basis, bias)) in self.bases.iter().zip(&self.biases).enumerate() {
            let [alpha, beta, gamma] = [style.vars[3 * l], style.vars[3 * l + 1], style.vars[3 * l + 2]];
            if g.value(gamma).numel() != bias.numel() {
                return Err(Error::Validation(format!("gamma size mismatch in layer {l}")));
            }
            let w = g.modulate(alpha, beta, basis.clone())?;
            let b0 = g.constant(bias.clone());
            let b = g.add(b0, gamma)?;
            out.push((w, b));
        }
        Ok(out)
    }
}

/// Plain `(weight, bias)` nodes from a bound conv parameter set.
pub fn plain_layer_vars(bound: &Bound) -> LayerVars {
    bound.vars.chunks(2).map(|c| (c[0], c[1])).collect()
}
