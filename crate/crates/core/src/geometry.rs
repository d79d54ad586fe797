//! Array geometry, the candidate location grid and path-length helpers.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

pub fn distance3(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn distance2(a: &Point2, b: &Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Length of the transmitter -> scatterer -> receiver path.
pub fn bistatic_path_length(tx: &Point3, rx: &Point3, p: &Point3) -> f64 {
    distance3(p, tx) + distance3(p, rx)
}

/// Receive antennas plus the illuminating transmitter and the OFDM numerology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaArray {
    positions: Vec<Point3>,
    tx_position: Point3,
    wavelength: f64,
    carrier_hz: f64,
    bandwidth_hz: f64,
    n_subcarriers: usize,
    sample_rate_hz: f64,
}

impl AntennaArray {
    /// Builds an array, deriving the wavelength from the carrier frequency.
    pub fn new(
        positions: Vec<Point3>,
        tx_position: Point3,
        carrier_hz: f64,
        bandwidth_hz: f64,
        n_subcarriers: usize,
        sample_rate_hz: f64,
    ) -> Result<Self, GeometryError> {
        let wavelength = SPEED_OF_LIGHT / carrier_hz;
        Self::with_wavelength(
            positions,
            tx_position,
            wavelength,
            carrier_hz,
            bandwidth_hz,
            n_subcarriers,
            sample_rate_hz,
        )
    }

    pub fn with_wavelength(
        positions: Vec<Point3>,
        tx_position: Point3,
        wavelength: f64,
        carrier_hz: f64,
        bandwidth_hz: f64,
        n_subcarriers: usize,
        sample_rate_hz: f64,
    ) -> Result<Self, GeometryError> {
        if positions.is_empty() {
            return Err(GeometryError::EmptyArray);
        }
        let all_finite = positions
            .iter()
            .chain(std::iter::once(&tx_position))
            .all(|p| p.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(GeometryError::NonFinite("antenna positions"));
        }
        if !(carrier_hz > 0.0 && wavelength > 0.0) {
            return Err(GeometryError::InvalidParameter(
                "carrier frequency and wavelength must be positive".into(),
            ));
        }
        let expected = SPEED_OF_LIGHT / carrier_hz;
        if ((wavelength - expected) / expected).abs() > 1e-3 {
            return Err(GeometryError::WavelengthMismatch {
                wavelength,
                carrier_hz,
            });
        }
        if n_subcarriers == 0 || !(sample_rate_hz > 0.0) || !(bandwidth_hz >= 0.0) {
            return Err(GeometryError::InvalidParameter(
                "need n_subcarriers >= 1, sample_rate > 0, bandwidth >= 0".into(),
            ));
        }
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if positions[i] == positions[j] {
                    return Err(GeometryError::DuplicateAntenna(i, j));
                }
            }
        }
        Ok(Self {
            positions,
            tx_position,
            wavelength,
            carrier_hz,
            bandwidth_hz,
            n_subcarriers,
            sample_rate_hz,
        })
    }

    /// The 64-element distributed layout used throughout the crate: eight
    /// 1x8 linear arrays, two per wall of a 6.5 m x 10 m room, with the
    /// illuminating UE in the middle of the room.
    ///
    /// Antennas are numbered array by array, so arrays 0, 2, 4 and 6 sit on
    /// four different walls.
    pub fn distributed_room() -> Self {
        let room = Room::default();
        let spacing = 0.07;
        let inset = 0.05;
        let h = 1.205;
        // (wall, center coordinate along the wall)
        let arrays: [(u8, f64); 8] = [
            (0, 2.0),
            (0, 4.5),
            (1, 3.3),
            (1, 6.7),
            (2, 4.5),
            (2, 2.0),
            (3, 6.7),
            (3, 3.3),
        ];
        let mut positions = Vec::with_capacity(64);
        for (wall, center) in arrays {
            for e in 0..8 {
                let off = (e as f64 - 3.5) * spacing;
                let p = match wall {
                    0 => [center + off, inset, h],
                    1 => [room.width - inset, center + off, h],
                    2 => [center - off, room.depth - inset, h],
                    _ => [inset, center - off, h],
                };
                positions.push(p);
            }
        }
        let tx = [room.width / 2.0, room.depth / 2.0, 0.8];
        Self::new(positions, tx, 2.61e9, 18e6, 100, 100.0).expect("static layout is valid")
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn n_antennas(&self) -> usize {
        self.positions.len()
    }

    pub fn tx_position(&self) -> Point3 {
        self.tx_position
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn carrier_hz(&self) -> f64 {
        self.carrier_hz
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_subcarriers
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn sample_interval(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth_hz / self.n_subcarriers as f64
    }

    /// Baseband offsets of the subcarriers, symmetric about the carrier.
    pub fn subcarrier_offsets(&self) -> Vec<f64> {
        let df = self.subcarrier_spacing();
        let mid = (self.n_subcarriers as f64 - 1.0) / 2.0;
        (0..self.n_subcarriers)
            .map(|k| (k as f64 - mid) * df)
            .collect()
    }

    /// Same receivers and numerology, different transmitter.
    pub fn with_tx(&self, tx: Point3) -> Self {
        Self {
            tx_position: tx,
            ..self.clone()
        }
    }

    /// Keeps only the listed antennas, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        let mut positions = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.positions.get(i).ok_or_else(|| {
                GeometryError::InvalidParameter(format!(
                    "antenna index {i} out of range for {} antennas",
                    self.positions.len()
                ))
            })?;
            positions.push(*p);
        }
        Self::with_wavelength(
            positions,
            self.tx_position,
            self.wavelength,
            self.carrier_hz,
            self.bandwidth_hz,
            self.n_subcarriers,
            self.sample_rate_hz,
        )
    }

    /// Same geometry with a reduced subcarrier count (bandwidth scaled to keep
    /// the spacing).
    pub fn with_subcarriers(&self, n_subcarriers: usize) -> Result<Self, GeometryError> {
        let bw = self.subcarrier_spacing() * n_subcarriers as f64;
        Self::with_wavelength(
            self.positions.clone(),
            self.tx_position,
            self.wavelength,
            self.carrier_hz,
            bw,
            n_subcarriers,
            self.sample_rate_hz,
        )
    }
}

/// Axis-aligned rectangular room, origin at one corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub width: f64,
    pub depth: f64,
}

impl Default for Room {
    fn default() -> Self {
        Self {
            width: 6.5,
            depth: 10.0,
        }
    }
}

impl Room {
    pub fn area(&self) -> f64 {
        self.width * self.depth
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p[0] >= 0.0 && p[0] <= self.width && p[1] >= 0.0 && p[1] <= self.depth
    }
}

/// Regular grid of candidate target locations at a fixed height.
///
/// Points are ordered row-major: index `m = iy * nx + ix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    pub target_height: f64,
    nx: usize,
    ny: usize,
}

impl Grid2D {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        cell: f64,
        target_height: f64,
    ) -> Result<Self, GeometryError> {
        if !(cell > 0.0) || !(x_max >= x_min) || !(y_max >= y_min) {
            return Err(GeometryError::InvalidParameter(format!(
                "grid bounds [{x_min},{x_max}]x[{y_min},{y_max}] with cell {cell}"
            )));
        }
        let count = |lo: f64, hi: f64| ((hi - lo) / cell + 1e-9).floor() as usize + 1;
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cell,
            target_height,
            nx: count(x_min, x_max),
            ny: count(y_min, y_max),
        })
    }

    /// Grid covering a whole room.
    pub fn covering(room: &Room, cell: f64, target_height: f64) -> Result<Self, GeometryError> {
        Self::new(0.0, room.width, 0.0, room.depth, cell, target_height)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn cell_of(&self, m: usize) -> (usize, usize) {
        (m % self.nx, m / self.nx)
    }

    pub fn point(&self, m: usize) -> Point2 {
        let (ix, iy) = self.cell_of(m);
        [
            self.x_min + ix as f64 * self.cell,
            self.y_min + iy as f64 * self.cell,
        ]
    }

    pub fn point3(&self, m: usize) -> Point3 {
        let [x, y] = self.point(m);
        [x, y, self.target_height]
    }

    pub fn points(&self) -> impl Iterator<Item = Point2> + '_ {
        (0..self.len()).map(move |m| self.point(m))
    }

    pub fn contains(&self, p: &Point2) -> bool {
        let eps = 1e-9;
        p[0] >= self.x_min - eps
            && p[0] <= self.x_max + eps
            && p[1] >= self.y_min - eps
            && p[1] <= self.y_max + eps
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}
