//! Split inference: the vehicle computes its own latents, the edge server
//! appends the image latent and runs the fusion head.
//!
//! Wire format of a latent payload (all little-endian):
//!
//! ```text
//! u32 latent_dim | u32 modality_count | u64 element_count | f64 × element_count
//! ```

use super::network::{concat_rows, extract_features, fuse, fusion_forward};
use super::{Modality, ModelSpec, Parameters, ScoreVector, Tensor};
use crate::{Error, Result};

const HEADER_BYTES: usize = 16;

/// Latents of the on-vehicle modalities (GPS, LiDAR), stacked row-wise.
pub fn vehicle_side_features(params: &Parameters, spec: &ModelSpec, gps: &Tensor, voxels: &Tensor) -> Result<Tensor> {
    let zc = extract_features(params, spec, gps, Modality::Gps)?;
    let zl = extract_features(params, spec, voxels, Modality::Lidar)?;
    fuse(&[zc, zl])
}

/// Completes inference from shipped vehicle latents and, when the model has
/// an image extractor, the locally sensed bit map.
pub fn mec_side_predict(params: &Parameters, spec: &ModelSpec, z_cl: &Tensor, image_bitmap: Option<&Tensor>) -> Result<ScoreVector> {
    let vehicle_rows = spec.modalities().into_iter().filter(|m| m.on_vehicle()).count();
    if z_cl.shape != [vehicle_rows, spec.latent_dim] {
        return Err(Error::invalid(format!(
            "vehicle latents have shape {:?}, expected [{vehicle_rows}, {}]",
            z_cl.shape, spec.latent_dim
        )));
    }
    let z = match (spec.extractor(Modality::Image), image_bitmap) {
        (Some(_), Some(img)) => {
            let zi = extract_features(params, spec, img, Modality::Image)?;
            concat_rows(z_cl, &fuse(&[zi])?)?
        }
        (Some(_), None) => return Err(Error::invalid("model expects an image bit map")),
        (None, Some(_)) => return Err(Error::invalid("model has no image extractor")),
        (None, None) => z_cl.clone(),
    };
    fusion_forward(params, spec, &z)
}

pub fn encode_features(z: &Tensor) -> Result<Vec<u8>> {
    if z.shape.len() != 2 {
        return Err(Error::invalid("latent payload must be a (modalities, d) matrix"));
    }
    let (rows, d) = (z.shape[0], z.shape[1]);
    let mut out = Vec::with_capacity(HEADER_BYTES + 8 * z.data.len());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(z.data.len() as u64).to_le_bytes());
    for v in &z.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Data("latent payload shorter than its header".into()));
    }
    let d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if count != d * rows || bytes.len() != HEADER_BYTES + 8 * count {
        return Err(Error::Data(format!(
            "latent payload length {} inconsistent with header (d={d}, modalities={rows}, elements={count})",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_BYTES..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![rows, d], data).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::predict;

    #[test]
    fn payload_element_counts() {
        for (b, expect) in [(256, 512), (64, 128)] {
            let spec = ModelSpec::desk_scale(&[(Modality::Gps, vec![2]), (Modality::Lidar, vec![4, 4, 2])], b);
            let p = Parameters::init(&spec, 0).unwrap();
            let gps = Tensor::vector(vec![0.2, -0.4]);
            let vox = Tensor::new(vec![4, 4, 2], (0..32).map(|i| (i % 3) as f64 - 1.0).collect()).unwrap();
            let z = vehicle_side_features(&p, &spec, &gps, &vox).unwrap();
            assert_eq!(z.len(), expect);
            let zc = extract_features(&p, &spec, &gps, Modality::Gps).unwrap();
            assert_eq!(z.row(0), zc.z.as_slice());
        }
    }

    #[test]
    fn split_matches_centralized_with_image() {
        let spec = ModelSpec::desk_scale(
            &[(Modality::Gps, vec![2]), (Modality::Lidar, vec![3, 3, 2]), (Modality::Image, vec![4, 5])],
            8,
        );
        let p = Parameters::init(&spec, 11).unwrap();
        let gps = Tensor::vector(vec![0.7, 0.1]);
        let vox = Tensor::new(vec![3, 3, 2], (0..18).map(|i| ((i * 7) % 4) as f64 - 2.0).collect()).unwrap();
        let img = Tensor::new(vec![4, 5], (0..20).map(|i| (i % 3) as f64).collect()).unwrap();
        let central = predict(&p, &spec, &[gps.clone(), vox.clone(), img.clone()]).unwrap();
        let z = vehicle_side_features(&p, &spec, &gps, &vox).unwrap();
        let split = mec_side_predict(&p, &spec, &z, Some(&img)).unwrap();
        assert_eq!(central, split);
        assert!(mec_side_predict(&p, &spec, &z, None).is_err());
        let wrong = Tensor::new(vec![1, 8], vec![0.0; 8]).unwrap();
        assert!(mec_side_predict(&p, &spec, &wrong, Some(&img)).is_err());
    }

    #[test]
    fn wire_round_trip_and_size() {
        let z = Tensor::new(vec![2, 256], (0..512).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let bytes = encode_features(&z).unwrap();
        assert_eq!(bytes.len(), 16 + 4096);
        assert_eq!(decode_features(&bytes).unwrap(), z);
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_features(&bytes[..8]).is_err());
    }
}
