//! Dense 3D grids in (Z, Y, X) order, X fastest-varying.

/// Row-major volume; `dims = [z, y, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Grid3 {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            dims[0] * dims[1] * dims[2],
            "grid data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Grid3 { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> &T {
        &self.data[self.idx(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.idx(z, y, x);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Coronal plane at row `y`, flattened (Z × X), Z-major.
    pub fn slice_y(&self, y: usize) -> Vec<T> {
        let [nz, _, nx] = self.dims;
        let mut out = Vec::with_capacity(nz * nx);
        for z in 0..nz {
            let base = self.idx(z, y, 0);
            out.extend_from_slice(&self.data[base..base + nx]);
        }
        out
    }

    /// Write a coronal plane (Z × X, Z-major) back at row `y`.
    pub fn set_slice_y(&mut self, y: usize, plane: &[T]) {
        let [nz, _, nx] = self.dims;
        assert_eq!(plane.len(), nz * nx, "plane length mismatch");
        for z in 0..nz {
            let base = self.idx(z, y, 0);
            self.data[base..base + nx].clone_from_slice(&plane[z * nx..(z + 1) * nx]);
        }
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }
}
