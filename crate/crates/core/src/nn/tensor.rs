use super::NnError;

/// NCHW single-precision tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self, NnError> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(NnError::shape("tensor", format!("{:?} needs {} values, got {}", dims, n, data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// One `(h, w)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Items `n` of the batch as a batch-1 tensor.
    pub fn item(&self, n: usize) -> Tensor4 {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor4 { dims: [1, self.dims[1], self.dims[2], self.dims[3]], data: self.data[n * per..(n + 1) * per].to_vec() }
    }

    /// Concatenates batch-compatible tensors along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4, NnError> {
        let first = items.first().ok_or_else(|| NnError::shape("stack", "empty batch"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return Err(NnError::shape("stack", format!("{:?} vs {:?}", t.dims, first.dims)));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 { dims: [n, c, h, w], data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<&crate::imagecore::ImageTensor> for Tensor4 {
    fn from(t: &crate::imagecore::ImageTensor) -> Self {
        Tensor4 { dims: [1, t.channels(), t.height(), t.width()], data: t.data().to_vec() }
    }
}
