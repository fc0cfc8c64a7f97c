use super::arch::{Architecture, LayerSpec, ResolvedLayer};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Executable layer stack: a resolved [`Architecture`] and its parameters.
///
/// Conv layers own `[kernel, bias]`, dense layers own `[weight, bias]`, in
/// layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    arch: Architecture,
    resolved: Vec<ResolvedLayer>,
    /// Index of each layer's first parameter, if it has any.
    slots: Vec<Option<usize>>,
    params: Vec<Tensor>,
    names: Vec<String>,
}

fn param_shapes(layer: &ResolvedLayer) -> Vec<Vec<usize>> {
    match layer.spec {
        LayerSpec::Conv { filters, kernel, .. } => {
            vec![vec![filters, layer.input[0], kernel, kernel], vec![filters]]
        }
        LayerSpec::Dense { units } => {
            let fan_in = layer.input.iter().product();
            vec![vec![units, fan_in], vec![units]]
        }
        LayerSpec::Crop { .. } | LayerSpec::Relu => Vec::new(),
    }
}

impl LayerStack {
    /// Glorot-uniform weights, zero biases.
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let resolved = arch.resolve()?;
        let mut params = Vec::new();
        for layer in &resolved {
            let shapes = param_shapes(layer);
            if let Some(w) = shapes.first() {
                let (fan_in, fan_out) = match w.as_slice() {
                    [f, c, k, _] => (c * k * k, f * k * k),
                    [u, i] => (*i, *u),
                    _ => unreachable!("weight shapes are rank 2 or 4"),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                params.push(Tensor::uniform(w, bound, rng));
                params.push(Tensor::zeros(&shapes[1]));
            }
        }
        Self::from_params(arch, params)
    }

    /// Rebuilds a stack from stored parameters, checking every shape.
    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let resolved = arch.resolve()?;
        let mut slots = Vec::with_capacity(resolved.len());
        let mut names = Vec::new();
        let mut next = 0;
        for (i, layer) in resolved.iter().enumerate() {
            let shapes = param_shapes(layer);
            if shapes.is_empty() {
                slots.push(None);
                continue;
            }
            slots.push(Some(next));
            let suffixes = match layer.spec {
                LayerSpec::Conv { .. } => ["kernel", "bias"],
                _ => ["weight", "bias"],
            };
            for (shape, suffix) in shapes.iter().zip(suffixes) {
                let p = params.get(next).ok_or_else(|| Error::Format {
                    kind: "parameters",
                    detail: format!("model '{}' is missing parameter {next}", arch.id),
                })?;
                if p.shape() != shape.as_slice() {
                    return Err(Error::shape("parameters", p.shape(), shape));
                }
                names.push(format!("layer{i}.{suffix}"));
                next += 1;
            }
        }
        if next != params.len() {
            return Err(Error::Format {
                kind: "parameters",
                detail: format!("model '{}' expects {next} tensors, got {}", arch.id, params.len()),
            });
        }
        Ok(Self {
            arch,
            resolved,
            slots,
            params,
            names,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[ResolvedLayer] {
        &self.resolved
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.resolved
            .last()
            .map_or(self.arch.input_shape.as_slice(), |l| l.output.as_slice())
    }

    pub fn flops(&self) -> u64 {
        self.resolved.iter().map(|l| l.spec.flops(&l.input, &l.output)).sum()
    }

    /// Puts every parameter on the tape, trainable or frozen.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant_ref(p) })
            .collect()
    }

    /// Runs layers `range` starting from `x`.
    pub fn run(&self, tape: &mut Tape<'_>, params: &[Var], mut x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        for i in range {
            let layer = &self.resolved[i];
            x = match layer.spec {
                LayerSpec::Crop {
                    top,
                    left,
                    height,
                    width,
                } => tape.crop(x, top, left, height, width)?,
                LayerSpec::Conv { stride, .. } => {
                    let s = self.slots[i].expect("conv has parameters");
                    let y = tape.conv2d(x, params[s], stride)?;
                    tape.channel_bias(y, params[s + 1])?
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::Dense { .. } => {
                    let s = self.slots[i].expect("dense has parameters");
                    let flat = if tape.value(x)?.rank() == 1 {
                        x
                    } else {
                        tape.flatten(x)?
                    };
                    let y = tape.matvec(params[s], flat, false)?;
                    tape.add(y, params[s + 1])?
                }
            };
        }
        Ok(x)
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.arch.input_shape.as_slice() {
            return Err(Error::shape("forward", x.shape(), &self.arch.input_shape));
        }
        Ok(())
    }
}
