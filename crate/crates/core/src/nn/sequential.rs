use super::{Cache, Mode, Module, ModuleId, NnError, Param, Primitive, PrimitiveSpec, Tensor};
use crate::rng::SplitMix64;

/// A chain of modules applied in order.
#[derive(Clone)]
pub struct Sequential {
    layers: Vec<Box<dyn Module>>,
    id: ModuleId,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Module>>) -> Self {
        Self {
            layers,
            id: ModuleId::new(),
        }
    }

    pub fn push(&mut self, layer: Box<dyn Module>) {
        self.id.bump();
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn Module>] {
        &self.layers
    }
}

impl Module for Sequential {
    fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&x, mode)?;
            caches.push(c);
            x = y;
        }
        Ok((x, self.id.cache(caches)))
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let caches: &Vec<Cache> = self.id.open(cache)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, c) in self.layers.iter().zip(caches).rev() {
            let (gx, gp) = layer.backward(c, &g)?;
            per_layer.push(gp);
            g = gx;
        }
        Ok((g, per_layer.into_iter().rev().flatten().collect()))
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.id.bump();
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn box_clone(&self) -> Box<dyn Module> {
        Box::new(self.clone())
    }
}

/// Two dense layers with a PReLU between them: `inputs → hidden → embedding`.
///
/// The first layer's parameters are in group `backbone`, the embedding
/// layer's in group `embedding`.
pub fn dense_net(
    inputs: usize,
    hidden: usize,
    embedding: usize,
    rng: &mut SplitMix64,
) -> Result<Sequential, NnError> {
    let layers: Vec<Box<dyn Module>> = vec![
        Box::new(Primitive::new(
            PrimitiveSpec::Dense {
                inputs,
                outputs: hidden,
            },
            "backbone",
            rng,
        )?),
        Box::new(Primitive::new(PrimitiveSpec::PRelu { channels: hidden }, "backbone", rng)?),
        Box::new(Primitive::new(
            PrimitiveSpec::Dense {
                inputs: hidden,
                outputs: embedding,
            },
            "embedding",
            rng,
        )?),
    ];
    Ok(Sequential::new(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{central_diff, max_rel_error, random_array};
    use ndarray::IxDyn;

    #[test]
    fn dense_net_gradients() {
        let mut rng = SplitMix64::new(1);
        let net = dense_net(5, 7, 3, &mut rng).unwrap();
        assert_eq!(net.param_count(), 5 * 7 + 7 + 7 * 3);
        let x = random_array(&mut rng, IxDyn(&[4, 5]));
        let r = random_array(&mut rng, IxDyn(&[4, 3]));
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        let (gx, gp) = net.backward(&cache, &r).unwrap();
        let obj = |m: &Sequential, x: &Tensor| (&m.forward(x, Mode::Train).unwrap().0 * &r).sum();
        assert!(max_rel_error(&gx, &central_diff(&x, 1e-6, |xp| obj(&net, xp))) < 1e-4);
        for (k, g) in gp.iter().enumerate() {
            let base = net.params()[k].value.clone();
            let fd = central_diff(&base, 1e-6, |v| {
                let mut m = net.clone();
                m.params_mut()[k].value = v.clone();
                obj(&m, &x)
            });
            assert!(max_rel_error(g, &fd) < 1e-4, "param {k}");
        }
    }

    #[test]
    fn groups_are_assigned() {
        let net = dense_net(2, 3, 2, &mut SplitMix64::new(0)).unwrap();
        let groups: Vec<_> = net.params().iter().map(|p| p.group.clone()).collect();
        assert_eq!(groups, ["backbone", "backbone", "embedding"]);
    }
}
