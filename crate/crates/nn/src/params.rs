use rand::Rng;

use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors owned by one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter. Used to tie derived
    /// artifacts (such as a retrieval database) to the exact weights that
    /// produced them.
    pub fn fingerprint_of(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in ids {
            for v in self.get(*id).data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Fully connected layer `y = x W^T + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Registers a layer with Glorot-uniform weights and zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w: Vec<f64> = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::matrix(outputs, inputs, w).expect("sized above"),
        );
        let b = store.add(
            format!("{name}.bias"),
            Tensor::matrix(1, outputs, vec![0.0; outputs]).expect("sized above"),
        );
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Dense::new(&mut store, "fc", 10, 6, &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert_eq!(store.get(layer.w).shape(), &[6, 10]);
        assert!(store.get(layer.w).data().iter().all(|w| w.abs() <= limit));
        assert!(store.get(layer.b).data().iter().all(|b| *b == 0.0));
        assert_eq!(store.name(layer.w), "fc.weight");
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::row_vector(vec![1.0, 2.0]));
        let before = store.fingerprint_of(&[id]);
        store.get_mut(id).data_mut()[1] = 2.0 + 1e-15;
        assert_ne!(before, store.fingerprint_of(&[id]));
    }
}
