//! On-disk containers for trained models, encoded databases and graphs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gleanvec::{EncodedDatabase, GleanVecModel};
use crate::graph::{GraphIndex, Reduced};
use crate::io as bin;
use crate::sphering::{FlexibleSpheringModel, SpheredDatabase};

const DATABASE_MAGIC: &[u8; 4] = b"GLDB";
const DATABASE_VERSION: u32 = 1;

/// A trained model of either kind, told apart by the file magic.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Sphering(FlexibleSpheringModel),
    GleanVec(GleanVecModel),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Sphering(m) => m.dim(),
            Model::GleanVec(m) => m.dim(),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            Model::Sphering(m) => m.fingerprint(),
            Model::GleanVec(m) => m.fingerprint(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        match self {
            Model::Sphering(m) => m.write_to(w),
            Model::GleanVec(m) => m.write_to(w),
        }
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        match bytes.get(..4) {
            Some(b"LVSP") => Ok(Model::Sphering(FlexibleSpheringModel::read_from(
                &mut bytes.as_slice(),
            )?)),
            Some(b"GLVC") => Ok(Model::GleanVec(GleanVecModel::read_from(
                &mut bytes.as_slice(),
            )?)),
            _ => Err(Error::Format("not a model file".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Stored database rows for either model kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Database {
    Sphered(SpheredDatabase),
    GleanVec(EncodedDatabase),
}

impl Database {
    pub fn len(&self) -> usize {
        match self {
            Database::Sphered(db) => db.len(),
            Database::GleanVec(db) => db.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            Database::Sphered(db) => db.fingerprint(),
            Database::GleanVec(db) => db.fingerprint(),
        }
    }

    /// Header (magic, version, n, D, d, C, model fingerprint), the tagged
    /// records (`u16` tag, `u16` padding, `d` × `f32`), then the `n × D` block
    /// of `x′`. Sphered databases have `d = C = 0` and no records.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATABASE_MAGIC)?;
        bin::write_u32(w, DATABASE_VERSION)?;
        match self {
            Database::Sphered(db) => {
                for v in [db.len(), db.dim(), 0, 0] {
                    bin::write_u32(w, v as u32)?;
                }
                bin::write_u64(w, db.fingerprint())?;
                bin::write_f32s(w, db.as_slice())?;
            }
            Database::GleanVec(db) => {
                for v in [db.len(), db.dim(), db.d(), db.clusters()] {
                    bin::write_u32(w, v as u32)?;
                }
                bin::write_u64(w, db.fingerprint())?;
                bin::write_u32s(w, db.records())?;
                bin::write_f32s(w, db.x_prime_block())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        bin::expect_magic(r, DATABASE_MAGIC)?;
        let version = bin::read_u32(r)?;
        if version != DATABASE_VERSION {
            return Err(Error::Format(format!(
                "unsupported database version {version}"
            )));
        }
        let n = bin::read_u32(r)? as usize;
        let dim = bin::read_u32(r)? as usize;
        let d = bin::read_u32(r)? as usize;
        let clusters = bin::read_u32(r)? as usize;
        let fingerprint = bin::read_u64(r)?;
        if dim == 0 {
            return Err(Error::Format("database dimension is zero".into()));
        }
        if clusters == 0 {
            if d != 0 {
                return Err(Error::Format("sphered database must have d = 0".into()));
            }
            let rows = bin::read_f32s(r, n * dim)?;
            return Ok(Database::Sphered(SpheredDatabase::from_parts(
                dim,
                rows,
                fingerprint,
            )));
        }
        if d == 0 || d > dim {
            return Err(Error::Format(format!(
                "bad target dimension {d} for D={dim}"
            )));
        }
        let records = bin::read_u32s(r, n * (1 + d))?;
        let x_prime = bin::read_f32s(r, n * dim)?;
        Ok(Database::GleanVec(EncodedDatabase::from_parts(
            dim,
            d,
            clusters,
            fingerprint,
            records,
            x_prime,
        )?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Pairs a model with its database for searching. GleanVec pairs search
/// lazily unless `eager` is set; sphering ignores the flag.
pub fn reduced<'a>(model: &'a Model, database: &'a Database, eager: bool) -> Result<Reduced<'a>> {
    let r = match (model, database) {
        (Model::Sphering(model), Database::Sphered(database)) => {
            Reduced::Sphering { model, database }
        }
        (Model::GleanVec(model), Database::GleanVec(database)) => Reduced::GleanVec {
            model,
            database,
            eager,
        },
        _ => return Err(Error::param("model and database are of different kinds")),
    };
    r.check()?;
    Ok(r)
}

pub fn save_graph(path: impl AsRef<Path>, graph: &GraphIndex) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    graph.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<GraphIndex> {
    GraphIndex::read_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_blobs;
    use crate::gleanvec::{encode_database, train_gleanvec, GleanVecParams};
    use crate::sphering::train_flexible;

    #[test]
    fn database_round_trips() {
        let (x, q) = synth_blobs(120, 30, 6, 2, 2, 3).unwrap();
        let sph = train_flexible(&x, &q).unwrap();
        let glv = train_gleanvec(&x, &q, &GleanVecParams::new(2, 3, 1)).unwrap();
        for db in [
            Database::Sphered(sph.project_database(&x).unwrap()),
            Database::GleanVec(encode_database(&x, &glv).unwrap()),
        ] {
            let mut buf = Vec::new();
            db.write_to(&mut buf).unwrap();
            assert_eq!(Database::read_from(&mut buf.as_slice()).unwrap(), db);
            assert!(Database::read_from(&mut &buf[..buf.len() - 2]).is_err());
        }
        let mut buf = Vec::new();
        Database::GleanVec(encode_database(&x, &glv).unwrap())
            .write_to(&mut buf)
            .unwrap();
        // header 32 bytes, records of 1 + d words, then x′
        assert_eq!(buf.len(), 32 + 120 * 4 * 4 + 120 * 6 * 4);
    }

    #[test]
    fn model_dispatch_by_magic() {
        let (x, q) = synth_blobs(120, 30, 6, 2, 2, 4).unwrap();
        for m in [
            Model::Sphering(train_flexible(&x, &q).unwrap()),
            Model::GleanVec(train_gleanvec(&x, &q, &GleanVecParams::new(2, 3, 1)).unwrap()),
        ] {
            let mut buf = Vec::new();
            m.write_to(&mut buf).unwrap();
            assert_eq!(Model::read_from(&mut buf.as_slice()).unwrap(), m);
        }
        assert!(Model::read_from(&mut &b"XXXXabcd"[..]).is_err());
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let (x, q) = synth_blobs(120, 30, 6, 2, 2, 5).unwrap();
        let sph = Model::Sphering(train_flexible(&x, &q).unwrap());
        let glv = train_gleanvec(&x, &q, &GleanVecParams::new(2, 3, 1)).unwrap();
        let db = Database::GleanVec(encode_database(&x, &glv).unwrap());
        assert!(reduced(&sph, &db, false).is_err());
        let other = Model::GleanVec(train_gleanvec(&x, &q, &GleanVecParams::new(3, 3, 2)).unwrap());
        assert!(matches!(
            reduced(&other, &db, true),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
