//! Teacher and student model bundles and their forward passes.
//!
//! The student owns the embedding stage, the encoder, the decoder, and a
//! learnable mask embedding. The teacher mirrors the embedding and encoder
//! only, receives no gradients ever, and is advanced by EMA from the
//! student.

use rand::Rng;

use crate::codebook::{Codebook, Similarity};
use crate::config::RunConfig;
use crate::diffcore::transformer::{stack_forward, BlockVars, StackParams};
use crate::diffcore::{Graph, Tensor, Var};
use crate::embedding::{embed, EmbedParams, EmbedVars};
use crate::geometry::PointCloud;
use crate::transport::PatchSet;

#[derive(Clone, Debug)]
pub struct StudentParams {
    pub embed: EmbedParams,
    pub encoder: StackParams,
    pub decoder: StackParams,
    /// Broadcast into every masked slot of the decoder input; zero-init.
    pub mask_embed: Tensor,
}

#[derive(Clone, Debug)]
pub struct TeacherParams {
    pub embed: EmbedParams,
    pub encoder: StackParams,
}

impl StudentParams {
    pub fn init(config: &RunConfig, rng: &mut impl Rng) -> Self {
        StudentParams {
            embed: EmbedParams::init(config.embed_hidden, config.dim, rng),
            encoder: StackParams::init(config.encoder_blocks, config.dim, rng),
            decoder: StackParams::init(config.decoder_blocks, config.dim, rng),
            mask_embed: Tensor::zeros(vec![config.dim]),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embed.visit("student.embed", f);
        self.encoder.visit("student.encoder", f);
        self.decoder.visit("student.decoder", f);
        f("student.mask_embed".into(), &self.mask_embed);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.embed.visit_mut("student.embed", f);
        self.encoder.visit_mut("student.encoder", f);
        self.decoder.visit_mut("student.decoder", f);
        f("student.mask_embed".into(), &mut self.mask_embed);
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (StudentVars, Vec<(String, Var)>) {
        let mut registry = Vec::new();
        let embed = self.embed.bind(g, trainable);
        register_embed(&embed, "student.embed", &mut registry);
        let encoder = self.encoder.bind(g, trainable);
        register_stack(&encoder, "student.encoder", &mut registry);
        let decoder = self.decoder.bind(g, trainable);
        register_stack(&decoder, "student.decoder", &mut registry);
        let mask_embed = if trainable {
            g.param(self.mask_embed.clone())
        } else {
            g.constant(self.mask_embed.clone())
        };
        registry.push(("student.mask_embed".into(), mask_embed));
        (
            StudentVars {
                embed,
                encoder,
                decoder,
                mask_embed,
            },
            registry,
        )
    }
}

impl TeacherParams {
    /// The teacher starts as a copy of the student's embedding and encoder.
    pub fn from_student(student: &StudentParams) -> Self {
        TeacherParams {
            embed: student.embed.clone(),
            encoder: student.encoder.clone(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embed.visit("teacher.embed", f);
        self.encoder.visit("teacher.encoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.embed.visit_mut("teacher.embed", f);
        self.encoder.visit_mut("teacher.encoder", f);
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn bind(&self, g: &mut Graph) -> TeacherVars {
        TeacherVars {
            embed: self.embed.bind(g, false),
            encoder: self.encoder.bind(g, false),
        }
    }
}

fn register_embed(vars: &EmbedVars, prefix: &str, registry: &mut Vec<(String, Var)>) {
    registry.push((format!("{prefix}.point1.weight"), vars.point1_w));
    registry.push((format!("{prefix}.point1.bias"), vars.point1_b));
    registry.push((format!("{prefix}.point2.weight"), vars.point2_w));
    registry.push((format!("{prefix}.point2.bias"), vars.point2_b));
    registry.push((format!("{prefix}.pos1.weight"), vars.pos1_w));
    registry.push((format!("{prefix}.pos1.bias"), vars.pos1_b));
    registry.push((format!("{prefix}.pos2.weight"), vars.pos2_w));
    registry.push((format!("{prefix}.pos2.bias"), vars.pos2_b));
}

fn register_stack(blocks: &[BlockVars], prefix: &str, registry: &mut Vec<(String, Var)>) {
    for (i, b) in blocks.iter().enumerate() {
        let p = format!("{prefix}.block{i}");
        registry.push((format!("{p}.wq"), b.wq));
        registry.push((format!("{p}.wk"), b.wk));
        registry.push((format!("{p}.wv"), b.wv));
        registry.push((format!("{p}.wo"), b.wo));
        registry.push((format!("{p}.bo"), b.bo));
        registry.push((format!("{p}.ff1.weight"), b.ff1_w));
        registry.push((format!("{p}.ff1.bias"), b.ff1_b));
        registry.push((format!("{p}.ff2.weight"), b.ff2_w));
        registry.push((format!("{p}.ff2.bias"), b.ff2_b));
        registry.push((format!("{p}.norm1.gain"), b.norm1_gain));
        registry.push((format!("{p}.norm1.bias"), b.norm1_bias));
        registry.push((format!("{p}.norm2.gain"), b.norm2_gain));
        registry.push((format!("{p}.norm2.bias"), b.norm2_bias));
    }
}

#[derive(Clone, Debug)]
pub struct StudentVars {
    pub embed: EmbedVars,
    pub encoder: Vec<BlockVars>,
    pub decoder: Vec<BlockVars>,
    pub mask_embed: Var,
}

#[derive(Clone, Debug)]
pub struct TeacherVars {
    pub embed: EmbedVars,
    pub encoder: Vec<BlockVars>,
}

/// Masked/visible token index split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskSpec {
    pub fn total(&self) -> usize {
        self.masked.len() + self.visible.len()
    }
}

/// Uniform sample of floor(L*r) masked positions without replacement;
/// both index lists come back sorted.
pub fn random_mask(l: usize, r: f64, rng: &mut impl Rng) -> crate::error::Result<MaskSpec> {
    if !(r > 0.0 && r < 1.0) {
        return Err(crate::error::Error::invalid(format!(
            "mask ratio {r} must be in (0, 1)"
        )));
    }
    let m = (l as f64 * r).floor() as usize;
    if m == 0 || m >= l {
        return Err(crate::error::Error::invalid(format!(
            "mask ratio {r} leaves {m} of {l} tokens masked"
        )));
    }
    let mut pool: Vec<usize> = (0..l).collect();
    for i in 0..m {
        let j = rng.gen_range(i..l);
        pool.swap(i, j);
    }
    let mut masked = pool[..m].to_vec();
    masked.sort_unstable();
    let mut visible = pool[m..].to_vec();
    visible.sort_unstable();
    Ok(MaskSpec { masked, visible })
}

/// Teacher path: embed the complete patch set and encode. Run on a
/// throwaway graph with constant leaves, so no gradient can exist.
pub fn teacher_forward(
    patches: &PatchSet,
    cloud: &PointCloud,
    params: &TeacherParams,
    heads: usize,
) -> Tensor {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let tokens = embed(&mut g, patches, cloud, &vars.embed);
    let out = stack_forward(&mut g, tokens.f, &vars.encoder, heads);
    g.value(out).clone()
}

/// Student path on an existing graph: encode visible tokens, splice the
/// mask embedding into the masked slots, add the positional embeddings on
/// all slots, and decode back to all L positions.
pub fn student_forward(
    g: &mut Graph,
    patches: &PatchSet,
    cloud: &PointCloud,
    mask: &MaskSpec,
    vars: &StudentVars,
    heads: usize,
) -> Var {
    let l = patches.num_patches();
    assert_eq!(mask.total(), l, "mask does not cover the patch set");
    let tokens = embed(g, patches, cloud, &vars.embed);
    let visible_f = g.gather_rows(tokens.f, &mask.visible);
    let encoded = stack_forward(g, visible_f, &vars.encoder, heads);
    let placed_visible = g.scatter_rows(encoded, &mask.visible, l);
    let mask_rows = g.repeat_row(vars.mask_embed, mask.masked.len());
    let placed_mask = g.scatter_rows(mask_rows, &mask.masked, l);
    let spliced = g.add(placed_visible, placed_mask);
    let dec_in = g.add(spliced, tokens.pe);
    stack_forward(g, dec_in, &vars.decoder, heads)
}

/// Mean KL(Q_t || Q_s) over rows of two row-stochastic matrices.
pub fn alignment_loss(q_t: &Tensor, q_s: &Tensor) -> f64 {
    assert_eq!(q_t.shape(), q_s.shape(), "invalid argument: assignment shapes");
    let rows = q_t.rows();
    let mut total = 0.0;
    for i in 0..rows {
        for (&p, &q) in q_t.row(i).iter().zip(q_s.row(i)) {
            if p > 0.0 {
                total += p * (p.ln() - q.ln());
            }
        }
    }
    total / rows as f64
}

/// Sum of p*ln(p) per row, averaged over rows (the gradient-free part of
/// the KL).
fn mean_neg_entropy(q_t: &Tensor) -> f64 {
    let rows = q_t.rows();
    let mut total = 0.0;
    for i in 0..rows {
        for &p in q_t.row(i) {
            if p > 0.0 {
                total += p * p.ln();
            }
        }
    }
    total / rows as f64
}

/// Graph-side alignment loss: student features at masked rows are matched
/// against the frozen teacher assignment. The scalar value equals
/// `alignment_loss` of the two assignment matrices; gradients flow only
/// through the student logits (the codebook is a constant).
pub fn alignment_loss_graph(
    g: &mut Graph,
    student_features: Var,
    mask: &MaskSpec,
    q_teacher: &Tensor,
    codebook: &Codebook,
    tau_s: f64,
    similarity: Similarity,
) -> Var {
    let rows = mask.masked.len();
    assert_eq!(q_teacher.rows(), rows);
    let gathered = g.gather_rows(student_features, &mask.masked);

    // Constant K×D code table, unit-normalized rows in cosine mode.
    let k = codebook.size();
    let d = codebook.dim();
    let mut table = codebook.vectors.clone();
    if similarity == Similarity::Cosine {
        for c in 0..k {
            let row = table.row_mut(c);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    let mut table_t = Tensor::zeros(vec![d, k]);
    for c in 0..k {
        for j in 0..d {
            table_t.set(j, c, table.get(c, j));
        }
    }

    let feats = match similarity {
        Similarity::Cosine => g.unit_rows(gathered),
        Similarity::Dot => gathered,
    };
    let codes = g.constant(table_t);
    let sims = g.matmul(feats, codes);
    let logits = g.scale(sims, 1.0 / tau_s);
    let log_q = g.log_softmax_rows(logits);
    let weighted = g.mul_const(log_q, q_teacher);
    let cross = g.sum_all(weighted);
    let cross = g.scale(cross, -1.0 / rows as f64);
    // Add the constant teacher term so the value is the true KL.
    g.add_scalar(cross, mean_neg_entropy(q_teacher))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::codebook::{soft_assign, Codebook};
    use crate::config::derive_rng;
    use crate::transport::knn_grouping;

    use super::*;

    fn micro_config() -> RunConfig {
        RunConfig {
            dim: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            embed_hidden: 8,
            codebook_size: 16,
            groups: 4,
            points: 64,
            knn_k: 6,
            ..RunConfig::default()
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(301)
    }

    #[test]
    fn mask_arithmetic_and_determinism() {
        let mut r = derive_rng(9, "mask", 0, 0);
        let spec = random_mask(10, 0.8, &mut r).unwrap();
        assert_eq!(spec.masked.len(), 8);
        assert_eq!(spec.visible.len(), 2);
        let mut all = spec.masked.clone();
        all.extend(&spec.visible);
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let mut r2 = derive_rng(9, "mask", 0, 0);
        let spec2 = random_mask(10, 0.8, &mut r2).unwrap();
        assert_eq!(spec, spec2);

        assert!(random_mask(10, 0.0, &mut r).is_err());
        assert!(random_mask(10, 0.05, &mut r).is_err()); // floor gives 0
    }

    #[test]
    fn student_output_covers_all_positions() {
        let config = micro_config();
        let mut r = rng();
        let student = StudentParams::init(&config, &mut r);
        let cloud = crate::data::generate_shape(&crate::data::SyntheticShapeSpec {
            class: crate::data::ShapeClass::Sphere,
            n_points: 64,
            jitter: 0.01,
            scale_range: (1.0, 1.0),
            seed: 5,
        })
        .unwrap();
        let patches = knn_grouping(&cloud, 4, 16).unwrap();
        // All but one masked still yields L output rows.
        let mask = MaskSpec {
            masked: vec![0, 1, 2],
            visible: vec![3],
        };
        let mut g = Graph::new();
        let (vars, _) = student.bind(&mut g, false);
        let out = student_forward(&mut g, &patches, &cloud, &mask, &vars, config.heads);
        assert_eq!(g.value(out).shape(), &[4, 8]);
    }

    #[test]
    fn kl_zero_iff_equal_and_closed_form() {
        let q = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]);
        assert!(alignment_loss(&q, &q).abs() < 1e-15);

        // One-hot teacher vs uniform student over K=16: ln 16.
        let mut one_hot = Tensor::zeros(vec![1, 16]);
        one_hot.set(0, 3, 1.0);
        let uniform = Tensor::matrix(1, 16, vec![1.0 / 16.0; 16]);
        let kl = alignment_loss(&one_hot, &uniform);
        assert!((kl - 16.0f64.ln()).abs() < 1e-12, "kl {kl}");
        assert!((kl - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_double_loop_oracle() {
        let mut r = rng();
        let soft = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let s = g.softmax_rows(v);
            g.value(s).clone()
        };
        let q_t = soft(Tensor::randn(vec![5, 8], 1.0, &mut r));
        let q_s = soft(Tensor::randn(vec![5, 8], 1.0, &mut r));
        let mut oracle = 0.0;
        for i in 0..5 {
            for k in 0..8 {
                let p = q_t.get(i, k);
                oracle += p * (p.ln() - q_s.get(i, k).ln());
            }
        }
        oracle /= 5.0;
        assert!((alignment_loss(&q_t, &q_s) - oracle).abs() < 1e-12);
        assert!(oracle >= 0.0);
    }

    #[test]
    fn graph_loss_value_matches_plain_kl() {
        let config = micro_config();
        let mut r = rng();
        let student = StudentParams::init(&config, &mut r);
        let cloud = crate::data::generate_shape(&crate::data::SyntheticShapeSpec {
            class: crate::data::ShapeClass::Box,
            n_points: 64,
            jitter: 0.01,
            scale_range: (1.0, 1.0),
            seed: 6,
        })
        .unwrap();
        let patches = knn_grouping(&cloud, 4, 16).unwrap();
        let mask = MaskSpec {
            masked: vec![0, 2, 3],
            visible: vec![1],
        };

        // Codebook from random features.
        let pool = Tensor::randn(vec![16, 8], 1.0, &mut r);
        let codebook = Codebook::init(&pool, 16, 0.99, &mut r).unwrap();

        // Teacher assignment over some random teacher features.
        let teacher_feats = Tensor::randn(vec![3, 8], 1.0, &mut r);
        let q_t = soft_assign(&teacher_feats, &codebook, 0.07, Similarity::Cosine).q;

        let mut g = Graph::new();
        let (vars, _) = student.bind(&mut g, false);
        let s_r = student_forward(&mut g, &patches, &cloud, &mask, &vars, config.heads);
        let loss_var = alignment_loss_graph(
            &mut g,
            s_r,
            &mask,
            &q_t,
            &codebook,
            0.1,
            Similarity::Cosine,
        );
        let graph_loss = g.value(loss_var).item();

        // Plain route: soft-assign the masked student rows and take the KL.
        let s_vals = g.value(s_r).clone();
        let mut masked_rows = Tensor::zeros(vec![3, 8]);
        for (dst, &src) in mask.masked.iter().enumerate() {
            masked_rows.row_mut(dst).copy_from_slice(s_vals.row(src));
        }
        let q_s = soft_assign(&masked_rows, &codebook, 0.1, Similarity::Cosine).q;
        let plain = alignment_loss(&q_t, &q_s);
        assert!(
            (graph_loss - plain).abs() < 1e-9,
            "graph {graph_loss} vs plain {plain}"
        );
        assert!(graph_loss >= 0.0);
    }

    #[test]
    fn teacher_has_no_gradient_path() {
        let config = micro_config();
        let mut r = rng();
        let student = StudentParams::init(&config, &mut r);
        let teacher = TeacherParams::from_student(&student);
        let cloud = crate::data::generate_shape(&crate::data::SyntheticShapeSpec {
            class: crate::data::ShapeClass::Sphere,
            n_points: 64,
            jitter: 0.01,
            scale_range: (1.0, 1.0),
            seed: 7,
        })
        .unwrap();
        let patches = knn_grouping(&cloud, 4, 16).unwrap();
        // Copied parameters give identical outputs on the same input.
        let t_out = teacher_forward(&patches, &cloud, &teacher, config.heads);
        let mut g = Graph::new();
        let (vars, _) = student.bind(&mut g, true);
        let tokens = embed(&mut g, &patches, &cloud, &vars.embed);
        let s_out = stack_forward(&mut g, tokens.f, &vars.encoder, config.heads);
        assert_eq!(g.value(s_out).data(), t_out.data());
    }
}
