//! Import of plane-wave channel data stored in HDF5 files laid out like the
//! PICMUS challenge datasets. Internal dataset paths come from a mapping file
//! because layouts differ between releases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Container, Kind};
use crate::probe::AcquisitionConfig;

/// Where each quantity lives inside the file. Paths are HDF5 dataset paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mapping {
    /// Real part of the channel data, shaped `[angles, elements, samples]`
    /// (a 2-D `[elements, samples]` dataset is a single transmission).
    pub data: String,
    /// Imaginary part; a file whose imaginary part is non-zero holds IQ data.
    #[serde(default)]
    pub data_imag: Option<String>,
    /// Demodulation frequency; non-zero means IQ data.
    #[serde(default)]
    pub modulation_frequency: Option<String>,
    /// Transmit angles in radians.
    #[serde(default)]
    pub angles: Option<String>,
    pub sampling_frequency: String,
    pub sound_speed: String,
    pub initial_time: String,
    /// Element positions, `[3, L]` or `[L, 3]` with x first, metres.
    pub probe_geometry: String,
    /// Added to the file's initial time to match this crate's convention
    /// (wavefront crossing the array centre at t = 0).
    #[serde(default)]
    pub start_time_offset: f64,
}

impl Mapping {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Dataset paths of the first dataset in a PICMUS file.
    pub fn picmus_default() -> Self {
        let base = "/US/US_DATASET0000";
        Self {
            data: format!("{base}/data/real"),
            data_imag: Some(format!("{base}/data/imag")),
            modulation_frequency: Some(format!("{base}/modulation_frequency")),
            angles: Some(format!("{base}/angles")),
            sampling_frequency: format!("{base}/sampling_frequency"),
            sound_speed: format!("{base}/sound_speed"),
            initial_time: format!("{base}/initial_time"),
            probe_geometry: format!("{base}/probe_geometry"),
            start_time_offset: 0.0,
        }
    }
}

/// Read access to named numeric datasets.
pub trait DataSource {
    /// Values in row-major order and the dataset shape. Missing paths yield
    /// [`Error::MissingDataset`].
    fn read(&self, path: &str) -> Result<(Vec<f64>, Vec<usize>)>;
}

fn scalar(src: &dyn DataSource, path: &str) -> Result<f64> {
    let (v, _) = src.read(path)?;
    v.first()
        .copied()
        .ok_or_else(|| Error::Format(format!("dataset '{path}' is empty")))
}

/// Element x positions from a `[3, L]` or `[L, 3]` geometry dataset.
fn element_x(values: &[f64], shape: &[usize], element_count: usize) -> Result<Vec<f64>> {
    match shape {
        [3, l] if *l == element_count => Ok(values[..element_count].to_vec()),
        [l, 3] if *l == element_count => Ok(values.chunks(3).map(|c| c[0]).collect()),
        [l] if *l == element_count => Ok(values.to_vec()),
        _ => Err(Error::Format(format!(
            "probe geometry shape {shape:?} does not match {element_count} elements"
        ))),
    }
}

/// Builds a channel container from the `alpha = 0` transmission.
pub fn import(src: &dyn DataSource, mapping: &Mapping) -> Result<Container> {
    if let Some(p) = &mapping.modulation_frequency {
        match src.read(p) {
            Ok((v, _)) if v.iter().any(|f| *f != 0.0) => {
                return Err(Error::Unsupported(format!(
                    "'{p}' is non-zero: the file holds IQ data, only RF is supported"
                )))
            }
            Ok(_) | Err(Error::MissingDataset(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if let Some(p) = &mapping.data_imag {
        match src.read(p) {
            Ok((v, _)) if v.iter().any(|f| *f != 0.0) => {
                return Err(Error::Unsupported(format!(
                    "'{p}' is non-zero: the file holds IQ data, only RF is supported"
                )))
            }
            Ok(_) | Err(Error::MissingDataset(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let (data, shape) = src.read(&mapping.data)?;
    let (n_angles, l, k) = match shape[..] {
        [a, l, k] => (a, l, k),
        [l, k] => (1, l, k),
        _ => return Err(Error::Format(format!("channel data has shape {shape:?}, expected 2 or 3 axes"))),
    };
    let angles = match &mapping.angles {
        Some(p) => src.read(p)?.0,
        None => vec![0.0; n_angles],
    };
    if angles.len() != n_angles {
        return Err(Error::Format(format!(
            "{} angles listed for {n_angles} transmissions",
            angles.len()
        )));
    }
    let a0 = angles
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Format("no transmissions".into()))?;
    if angles[a0].abs() > 1e-9 {
        return Err(Error::Unsupported(format!(
            "no normal-incidence transmission (closest angle {} rad)",
            angles[a0]
        )));
    }
    let frame = data[a0 * l * k..(a0 + 1) * l * k].to_vec();

    let (geom, gshape) = src.read(&mapping.probe_geometry)?;
    let xs = element_x(&geom, &gshape, l)?;
    let acquisition = AcquisitionConfig {
        sound_speed: scalar(src, &mapping.sound_speed)?,
        sampling_rate: scalar(src, &mapping.sampling_frequency)?,
        start_time: scalar(src, &mapping.initial_time)? + mapping.start_time_offset,
        sample_count: k,
        steering_angle: 0.0,
        noise_std: 0.0,
    };
    let pitch = if l > 1 { (xs[l - 1] - xs[0]) / (l - 1) as f64 } else { 0.0 };
    Ok(Container::new(Kind::Channel, vec![l, k], frame)?
        .with_attr("acquisition", &acquisition)
        .with_attr("element_x", &xs)
        .with_attr("pitch", pitch)
        .with_attr("transmission_index", a0)
        .with_attr("mapping", mapping))
}

#[cfg(feature = "hdf5")]
pub use self::hdf5_source::Hdf5Source;

#[cfg(feature = "hdf5")]
mod hdf5_source {
    use super::*;

    pub struct Hdf5Source {
        file: hdf5::File,
    }

    impl Hdf5Source {
        pub fn open(path: &std::path::Path) -> Result<Self> {
            let file = hdf5::File::open(path).map_err(|e| Error::Format(e.to_string()))?;
            Ok(Self { file })
        }
    }

    impl DataSource for Hdf5Source {
        fn read(&self, path: &str) -> Result<(Vec<f64>, Vec<usize>)> {
            let ds = self
                .file
                .dataset(path)
                .map_err(|_| Error::MissingDataset(path.to_string()))?;
            let values: Vec<f64> = ds.read_raw().map_err(|e| Error::Format(format!("{path}: {e}")))?;
            Ok((values, ds.shape()))
        }
    }
}
