//! Bottom networks `f_i`, completers `XCom_i`, and the shared top network `h`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{LayerCache, Matrix, Mlp};
use crate::rng;

/// Layer widths for the three network roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub embed_dim: usize,
    /// Hidden widths of each bottom network (`d_i → … → e`).
    pub bottom_hidden: Vec<usize>,
    /// Hidden widths of the top network (`e → … → C`).
    pub top_hidden: Vec<usize>,
    /// Hidden widths of each completer (`e → … → d_i`); defaults to one layer of width `e`.
    pub xcom_hidden: Option<Vec<usize>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            bottom_hidden: vec![64, 64],
            top_hidden: vec![64, 64],
            xcom_hidden: None,
        }
    }
}

impl ArchConfig {
    /// Single linear bottoms and tops with an identity-width completer; for gradient checks.
    pub fn tiny(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            bottom_hidden: vec![],
            top_hidden: vec![],
            xcom_hidden: Some(vec![]),
        }
    }

    pub fn bottom_dims(&self, d_in: usize) -> Vec<usize> {
        let mut d = vec![d_in];
        d.extend(&self.bottom_hidden);
        d.push(self.embed_dim);
        d
    }

    pub fn xcom_dims(&self, d_out: usize) -> Vec<usize> {
        let mut d = vec![self.embed_dim];
        match &self.xcom_hidden {
            Some(h) => d.extend(h),
            None => d.push(self.embed_dim),
        }
        d.push(d_out);
        d
    }

    pub fn top_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.top_hidden);
        d.push(classes);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub bottoms: Vec<Mlp>,
    pub xcoms: Vec<Mlp>,
    pub top: Mlp,
}

impl ModelBundle {
    pub fn new(
        arch: &ArchConfig,
        client_dims: &[usize],
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if client_dims.is_empty() {
            return Err(Error::config("need at least one client"));
        }
        let mut init = rng::stream(seed, "model/init");
        let bottoms = client_dims
            .iter()
            .map(|&d| Mlp::new(&arch.bottom_dims(d), &mut init))
            .collect::<Result<Vec<_>>>()?;
        let xcoms = client_dims
            .iter()
            .map(|&d| Mlp::new(&arch.xcom_dims(d), &mut init))
            .collect::<Result<Vec<_>>>()?;
        let top = Mlp::new(&arch.top_dims(arch.embed_dim, classes), &mut init)?;
        let bundle = Self {
            bottoms,
            xcoms,
            top,
        };
        bundle.check()?;
        Ok(bundle)
    }

    /// Checks that every composition used by the losses type-checks.
    pub fn check(&self) -> Result<()> {
        if self.bottoms.len() != self.xcoms.len() || self.bottoms.is_empty() {
            return Err(Error::config(
                "bundle needs one bottom and one completer per client",
            ));
        }
        let e = self.top.in_dim();
        for (i, (b, x)) in self.bottoms.iter().zip(&self.xcoms).enumerate() {
            if b.out_dim() != e || x.in_dim() != e || x.out_dim() != b.in_dim() {
                return Err(Error::config(format!(
                    "client {i}: bottom {:?} / completer {:?} incompatible with embedding width {e}",
                    b.dims(),
                    x.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.bottoms.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.top.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.top.out_dim()
    }

    pub fn client_dims(&self) -> Vec<usize> {
        self.bottoms.iter().map(Mlp::in_dim).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bottoms: self.bottoms.iter().map(Mlp::zeros_like).collect(),
            xcoms: self.xcoms.iter().map(Mlp::zeros_like).collect(),
            top: self.top.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.networks().map(|(_, net)| net.param_count()).sum()
    }

    /// Networks in flattening order: bottoms, completers, top.
    pub fn networks(&self) -> impl Iterator<Item = (NetRole, &Mlp)> {
        let bottoms = self
            .bottoms
            .iter()
            .enumerate()
            .map(|(i, n)| (NetRole::Bottom(i), n));
        let xcoms = self
            .xcoms
            .iter()
            .enumerate()
            .map(|(i, n)| (NetRole::XCom(i), n));
        bottoms
            .chain(xcoms)
            .chain(std::iter::once((NetRole::Top, &self.top)))
    }

    fn networks_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        self.bottoms
            .iter_mut()
            .chain(self.xcoms.iter_mut())
            .chain(std::iter::once(&mut self.top))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, net) in self.networks() {
            net.flatten_into(&mut out);
        }
        out
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::validation(format!(
                "parameter vector has {} entries, bundle needs {}",
                theta.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for net in self.networks_mut() {
            at += net.load_from(&theta[at..])?;
        }
        Ok(())
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.unflatten(theta)?;
        Ok(out)
    }

    /// The parts of the bundle a single client may touch during independent inference.
    pub fn client_view(&self, client: usize) -> Result<ClientView<'_>> {
        if client >= self.k() {
            return Err(Error::validation(format!(
                "client {client} out of range (k = {})",
                self.k()
            )));
        }
        Ok(ClientView {
            client,
            bottom: &self.bottoms[client],
            xcom: &self.xcoms[client],
            top: &self.top,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetRole {
    Bottom(usize),
    XCom(usize),
    Top,
}

/// One client's bottom and completer plus the shared top.
#[derive(Debug, Clone, Copy)]
pub struct ClientView<'a> {
    pub client: usize,
    pub bottom: &'a Mlp,
    pub xcom: &'a Mlp,
    pub top: &'a Mlp,
}

/// `E_i = f_i(x_i)`.
pub fn bottom_forward(
    bundle: &ModelBundle,
    client: usize,
    block: &Matrix,
) -> Result<(Matrix, LayerCache)> {
    let net = bundle
        .bottoms
        .get(client)
        .ok_or_else(|| Error::validation(format!("client {client} out of range")))?;
    net.forward(block)
}

/// `X̃_i = XCom_i(source)`; the source is an `n × e` embedding.
pub fn xcom_complete(
    bundle: &ModelBundle,
    client: usize,
    source: &Matrix,
) -> Result<(Matrix, LayerCache)> {
    let net = bundle
        .xcoms
        .get(client)
        .ok_or_else(|| Error::validation(format!("client {client} out of range")))?;
    net.forward(source)
}

/// Completer input for `client`: the mean of the source clients' embeddings.
/// With two clients and a single source this is the other client's embedding as is.
pub fn xcom_source(sources: &[&Matrix]) -> Result<Matrix> {
    avg_embeddings(sources)
}

pub fn top_forward(bundle: &ModelBundle, embedding: &Matrix) -> Result<(Matrix, LayerCache)> {
    bundle.top.forward(embedding)
}

/// Takes reconstructed values at masked positions and original values elsewhere.
pub fn merge_partial(original: &Matrix, reconstructed: &Matrix, mask: &[bool]) -> Result<Matrix> {
    if original.shape() != reconstructed.shape() {
        return Err(Error::Dimension {
            op: "merge_partial",
            left: original.shape(),
            right: reconstructed.shape(),
        });
    }
    if mask.len() != original.data().len() {
        return Err(Error::Dimension {
            op: "merge_partial(mask)",
            left: original.shape(),
            right: (mask.len(), 1),
        });
    }
    let data = original
        .data()
        .iter()
        .zip(reconstructed.data())
        .zip(mask)
        .map(|((&o, &r), &m)| if m { r } else { o })
        .collect();
    Matrix::from_vec(original.rows(), original.cols(), data)
}

/// Elementwise mean.
pub fn avg_embeddings(embeddings: &[&Matrix]) -> Result<Matrix> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::validation("avg_embeddings needs at least one embedding"))?;
    if embeddings.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = (*first).clone();
    for e in &embeddings[1..] {
        acc.add_assign(e)?;
    }
    Ok(acc.scale(1.0 / embeddings.len() as f64))
}

const CHECKPOINT_FORMAT: &str = "xvfl-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub role: NetRole,
    pub dims: Vec<usize>,
}

/// Self-describing JSON container: layer shapes, flat parameters, and the
/// hash of the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub round: usize,
    pub networks: Vec<NetShape>,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn from_bundle(bundle: &ModelBundle, config_hash: &str, round: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: config_hash.into(),
            round,
            networks: bundle
                .networks()
                .map(|(role, net)| NetShape {
                    role,
                    dims: net.dims(),
                })
                .collect(),
            theta: bundle.flatten(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format '{}'", ck.format)));
        }
        Ok(ck)
    }

    /// Rebuilds the bundle described by the checkpoint.
    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let mut bottoms = Vec::new();
        let mut xcoms = Vec::new();
        let mut top = None;
        for shape in &self.networks {
            let net = Mlp::zeros(&shape.dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
            match shape.role {
                NetRole::Bottom(i) if i == bottoms.len() => bottoms.push(net),
                NetRole::XCom(i) if i == xcoms.len() => xcoms.push(net),
                NetRole::Top if top.is_none() => top = Some(net),
                role => return Err(Error::Checkpoint(format!("unexpected network {role:?}"))),
            }
        }
        let top = top.ok_or_else(|| Error::Checkpoint("missing top network".into()))?;
        let mut bundle = ModelBundle {
            bottoms,
            xcoms,
            top,
        };
        bundle
            .check()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        bundle
            .unflatten(&self.theta)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(bundle)
    }

    /// Loads parameters into a bundle of the expected shape.
    pub fn restore_into(&self, expected: &ModelBundle) -> Result<ModelBundle> {
        let want: Vec<NetShape> = expected
            .networks()
            .map(|(role, net)| NetShape {
                role,
                dims: net.dims(),
            })
            .collect();
        if want != self.networks {
            return Err(Error::Checkpoint(
                "layer shapes differ from the expected model".into(),
            ));
        }
        self.to_bundle()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(k: usize) -> ModelBundle {
        let dims: Vec<usize> = (0..k).map(|i| 3 + i).collect();
        ModelBundle::new(&ArchConfig::default(), &dims, 4, 5).unwrap()
    }

    #[test]
    fn shapes_are_sound() {
        let b = bundle(3);
        b.check().unwrap();
        let x = Matrix::filled(7, 4, 0.5);
        let (e, _) = bottom_forward(&b, 1, &x).unwrap();
        assert_eq!(e.shape(), (7, 64));
        let (xt, _) = xcom_complete(&b, 2, &e).unwrap();
        assert_eq!(xt.shape(), (7, 5));
        let (logits, _) = top_forward(&b, &e).unwrap();
        assert_eq!(logits.shape(), (7, 4));
        assert!(bottom_forward(&b, 0, &x).is_err());
    }

    #[test]
    fn identity_bottom_passes_features_through() {
        let arch = ArchConfig::tiny(3);
        let mut b = ModelBundle::new(&arch, &[3, 3], 2, 1).unwrap();
        b.bottoms[0].layers_mut()[0].weight = Matrix::identity(3);
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]);
        assert_eq!(bottom_forward(&b, 0, &x).unwrap().0, x);
    }

    #[test]
    fn identity_top_returns_embedding() {
        let arch = ArchConfig {
            embed_dim: 3,
            bottom_hidden: vec![],
            top_hidden: vec![],
            xcom_hidden: Some(vec![]),
        };
        let mut b = ModelBundle::new(&arch, &[2], 3, 1).unwrap();
        b.top = Mlp::new(&[3], &mut rng::stream(0, "t")).unwrap();
        let e = Matrix::from_rows(&[[1.0, -1.0, 2.0]]);
        assert_eq!(top_forward(&b, &e).unwrap().0, e);
    }

    #[test]
    fn flatten_roundtrip() {
        let b = bundle(2);
        let theta = b.flatten();
        assert_eq!(theta.len(), b.param_count());
        let mut z = b.zeros_like();
        z.unflatten(&theta).unwrap();
        assert_eq!(z, b);
        assert!(z.unflatten(&theta[1..]).is_err());
    }

    #[test]
    fn merge_laws() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let y = Matrix::from_rows(&[[9.0, 8.0], [7.0, 6.0]]);
        assert_eq!(merge_partial(&x, &y, &[false; 4]).unwrap(), x);
        assert_eq!(merge_partial(&x, &y, &[true; 4]).unwrap(), y);
        let mixed = merge_partial(&x, &y, &[true, false, false, true]).unwrap();
        assert_eq!(mixed, Matrix::from_rows(&[[9.0, 2.0], [3.0, 6.0]]));
        assert!(merge_partial(&x, &Matrix::zeros(1, 2), &[false; 4]).is_err());
    }

    #[test]
    fn averaging() {
        let a = Matrix::from_rows(&[[1.0, 3.0]]);
        let b = Matrix::from_rows(&[[3.0, 1.0]]);
        assert_eq!(
            avg_embeddings(&[&a, &b]).unwrap(),
            Matrix::from_rows(&[[2.0, 2.0]])
        );
        assert_eq!(avg_embeddings(&[&a, &a, &a]).unwrap(), a);
        assert!(avg_embeddings(&[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let b = bundle(2);
        Checkpoint::from_bundle(&b, "abc", 3).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.config_hash, "abc");
        assert_eq!(ck.restore_into(&b).unwrap(), b);
        let other = ModelBundle::new(&ArchConfig::default(), &[3, 5], 4, 5).unwrap();
        assert!(matches!(ck.restore_into(&other), Err(Error::Checkpoint(_))));
        let mut broken = ck.clone();
        broken.theta.pop();
        assert!(matches!(broken.to_bundle(), Err(Error::Checkpoint(_))));
    }
}
