use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::{embedding, LinearIds, TransformerIds};
use super::{ModelConfig, ModelError};
use crate::component::{Component, ComponentSet};
use crate::corpus::{TokenSequence, TokenizedRecipe};
use crate::diffcore::{ParamId, ParamStore, Scalar, Tape, Tensor, Var, NORM_EPS};

/// Inference batch size used by the tape-free embedding helpers.
const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug)]
struct Hierarchical {
    sentence: TransformerIds,
    list: TransformerIds,
}

#[derive(Clone, Debug)]
struct Head {
    target: Component,
    source: Component,
    linear: LinearIds,
}

/// Every learnable tensor of the model, plus the structure that ties them
/// to encoders.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: ModelConfig,
    vocab_size: usize,
    store: ParamStore<T>,
    title: TransformerIds,
    ingredients: Hierarchical,
    instructions: Hierarchical,
    merge: LinearIds,
    image: LinearIds,
    heads: Vec<Head>,
    empty: [ParamId; 3],
}

/// Tape nodes for a batch of recipes: one `B x width` matrix per component
/// (indexed by [`Component::index`]) and the normalized `B x joint_dim`
/// recipe embeddings.
#[derive(Clone, Copy, Debug)]
pub struct RecipeVars {
    pub components: [Var; 3],
    pub recipe: Var,
}

impl RecipeVars {
    pub fn component(&self, c: Component) -> Var {
        self.components[c.index()]
    }
}

/// Component embeddings of one recipe. `present` marks components that
/// came from the recipe text; the others hold the learned empty vector
/// (or a hallucinated replacement).
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentEmbeddings<T> {
    pub vectors: [Vec<T>; 3],
    pub present: ComponentSet,
}

impl<T> ComponentEmbeddings<T> {
    pub fn get(&self, c: Component) -> &[T] {
        &self.vectors[c.index()]
    }
}

fn check_shape<T: Scalar>(
    name: &str,
    expected: &Tensor<T>,
    found: &Tensor<T>,
) -> Result<(), ModelError> {
    if expected.shape() != found.shape() {
        return Err(ModelError::ShapeMismatch {
            name: name.to_string(),
            expected: expected.shape().to_vec(),
            found: found.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> ModelParams<T> {
    /// Randomly initialized parameters; identical `seed` gives identical
    /// values for `f32` and `f64` up to rounding.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(ModelError::InvalidConfig(
                "vocabulary must hold the two specials".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let (d, msl, ms) = (cfg.width, cfg.max_sentence_len, cfg.max_sentences);
        let title = TransformerIds::new(
            &mut store,
            &mut rng,
            "title.sentence",
            Some(vocab_size),
            msl,
            cfg,
        );
        let hier = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| Hierarchical {
            sentence: TransformerIds::new(
                store,
                rng,
                &format!("{name}.sentence"),
                Some(vocab_size),
                msl,
                cfg,
            ),
            list: TransformerIds::new(store, rng, &format!("{name}.list"), None, ms, cfg),
        };
        let ingredients = hier(&mut store, &mut rng, "ingredients");
        let instructions = hier(&mut store, &mut rng, "instructions");
        let merge = LinearIds::new(&mut store, &mut rng, "merge", 3 * d, cfg.joint_dim);
        let image = LinearIds::new(&mut store, &mut rng, "image", cfg.image_dim, cfg.joint_dim);
        let heads = Component::ordered_pairs()
            .map(|(target, source)| Head {
                target,
                source,
                linear: LinearIds::new(
                    &mut store,
                    &mut rng,
                    &format!("heads.{}_to_{}", source.short_name(), target.short_name()),
                    d,
                    d,
                ),
            })
            .collect();
        let empty = Component::ALL
            .map(|c| store.insert(format!("empty.{}", c.name()), embedding(&mut rng, 1, d)));
        Ok(Self {
            config,
            vocab_size,
            store,
            title,
            ingredients,
            instructions,
            merge,
            image,
            heads,
            empty,
        })
    }

    /// Rebuilds parameters from named tensors, checking that the set of
    /// names and every shape match what `config` and `vocab_size` imply.
    pub fn from_tensors(
        config: ModelConfig,
        vocab_size: usize,
        mut tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocab_size, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = tensors
                .remove(&name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            check_shape(&name, model.store.get(id), &t)?;
            model.store.set(id, t);
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(ModelError::UnexpectedTensor(name));
        }
        Ok(model)
    }

    /// Copies values from `other`, which must have identical names and
    /// shapes.
    pub fn load_from(&mut self, other: &ModelParams<T>) -> Result<(), ModelError> {
        let tensors = other
            .tensors()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        *self = Self::from_tensors(self.config.clone(), self.vocab_size, tensors)?;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            store: self.store.cast(),
            title: self.title.clone(),
            ingredients: self.ingredients.clone(),
            instructions: self.instructions.clone(),
            merge: self.merge,
            image: self.image,
            heads: self.heads.clone(),
            empty: self.empty,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.store.iter().map(|(_, n, t)| (n, t))
    }

    /// Ids of every parameter whose canonical name starts with `prefix`.
    pub fn param_ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Parameter-name prefix owned by a component's encoder.
    pub fn encoder_prefix(c: Component) -> &'static str {
        match c {
            Component::Title => "title.",
            Component::Ingredients => "ingredients.",
            Component::Instructions => "instructions.",
        }
    }

    pub fn image_param_ids(&self) -> [ParamId; 2] {
        [self.image.weight, self.image.bias]
    }

    pub fn empty_param_id(&self, c: Component) -> ParamId {
        self.empty[c.index()]
    }

    /// Weight and bias ids of the head projecting `source` into `target`.
    pub fn head_param_ids(&self, target: Component, source: Component) -> [ParamId; 2] {
        let h = self.head(target, source);
        [h.weight, h.bias]
    }

    fn head(&self, target: Component, source: Component) -> LinearIds {
        self.heads
            .iter()
            .find(|h| h.target == target && h.source == source)
            .map(|h| h.linear)
            .unwrap_or_else(|| panic!("no head {source} -> {target}"))
    }

    pub fn empty_vector(&self, c: Component) -> &[T] {
        self.store.get(self.empty[c.index()]).data()
    }

    // ---- tape forward ----

    /// Component embeddings for a batch, substituting the learned empty
    /// vector wherever a recipe lacks a component or the component is
    /// disabled in the config.
    pub fn forward_components(
        &self,
        tape: &mut Tape<T>,
        recipes: &[&TokenizedRecipe],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<[Var; 3], ModelError> {
        if let Some(r) = recipes
            .iter()
            .find(|r| !Component::ALL.iter().any(|&c| r.has(c)))
        {
            return Err(ModelError::EmptyRecipe(r.id.clone()));
        }
        let enabled = self.config.components.set();
        let mut out = Vec::with_capacity(3);
        for c in Component::ALL {
            let with: Vec<usize> = if enabled.contains(c) {
                (0..recipes.len()).filter(|&i| recipes[i].has(c)).collect()
            } else {
                Vec::new()
            };
            let empty = tape.param(&self.store, self.empty[c.index()]);
            if with.is_empty() {
                out.push(tape.select_rows(empty, vec![Some(0); recipes.len()]));
                continue;
            }
            let subset: Vec<&TokenizedRecipe> = with.iter().map(|&i| recipes[i]).collect();
            let encoded = self.encode_component(tape, c, &subset, rng.as_deref_mut())?;
            if with.len() == recipes.len() {
                out.push(encoded);
                continue;
            }
            let stacked = tape.concat_rows(&[encoded, empty]);
            let k = with.len();
            let mut slot = vec![k; recipes.len()];
            for (pos, &i) in with.iter().enumerate() {
                slot[i] = pos;
            }
            out.push(tape.select_rows(stacked, slot.into_iter().map(Some).collect()));
        }
        Ok([out[0], out[1], out[2]])
    }

    fn encode_component(
        &self,
        tape: &mut Tape<T>,
        c: Component,
        recipes: &[&TokenizedRecipe],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        match c {
            Component::Title => {
                let seqs: Vec<&TokenSequence> = recipes.iter().map(|r| &r.title).collect();
                self.title.encode_tokens(tape, &self.store, cfg, &seqs, rng)
            }
            Component::Ingredients | Component::Instructions => {
                let h = if c == Component::Ingredients {
                    &self.ingredients
                } else {
                    &self.instructions
                };
                let mut seqs = Vec::new();
                let mut groups = Vec::with_capacity(recipes.len());
                for r in recipes {
                    let sents = r.sentences(c);
                    let start = seqs.len();
                    seqs.extend(sents.iter().take(cfg.max_sentences));
                    groups.push((start..seqs.len()).collect::<Vec<_>>());
                }
                let sentence_vecs =
                    h.sentence
                        .encode_tokens(tape, &self.store, cfg, &seqs, rng.as_deref_mut())?;
                h.list
                    .encode_rows(tape, &self.store, cfg, sentence_vecs, &groups, rng)
            }
        }
    }

    /// `l2_normalize(merge([e_ing; e_ins; e_ttl]))`.
    pub fn merge_vars(&self, tape: &mut Tape<T>, components: [Var; 3]) -> Var {
        let parts = Component::MERGE_ORDER.map(|c| components[c.index()]);
        let cat = tape.concat_cols(&parts);
        let m = self.merge.vars(tape, &self.store).apply(tape, cat);
        tape.l2_normalize(m)
    }

    pub fn forward_recipes(
        &self,
        tape: &mut Tape<T>,
        recipes: &[&TokenizedRecipe],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<RecipeVars, ModelError> {
        let components = self.forward_components(tape, recipes, rng)?;
        let recipe = self.merge_vars(tape, components);
        Ok(RecipeVars { components, recipe })
    }

    /// `l2_normalize(image(features))` for a `B x image_dim` node.
    pub fn forward_images(&self, tape: &mut Tape<T>, features: Var) -> Var {
        let p = self.image.vars(tape, &self.store).apply(tape, features);
        tape.l2_normalize(p)
    }

    /// `g_{source -> target}` applied row-wise (identity under the
    /// identity-heads ablation).
    pub fn project_var(
        &self,
        tape: &mut Tape<T>,
        target: Component,
        source: Component,
        x: Var,
    ) -> Var {
        if self.config.identity_heads {
            return x;
        }
        self.head(target, source)
            .vars(tape, &self.store)
            .apply(tape, x)
    }

    // ---- tape-free inference ----

    pub fn embed_components(
        &self,
        recipes: &[&TokenizedRecipe],
    ) -> Result<Vec<ComponentEmbeddings<T>>, ModelError> {
        let enabled = self.config.components.set();
        let mut out = Vec::with_capacity(recipes.len());
        for chunk in recipes.chunks(EMBED_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.forward_components(&mut tape, chunk, None)?;
            for (i, r) in chunk.iter().enumerate() {
                let vectors = Component::ALL.map(|c| tape.value(vars[c.index()]).row(i).to_vec());
                let present = Component::ALL
                    .into_iter()
                    .filter(|&c| enabled.contains(c) && r.has(c))
                    .collect();
                out.push(ComponentEmbeddings { vectors, present });
            }
        }
        Ok(out)
    }

    /// Merges component embeddings into normalized recipe embeddings
    /// (`n x joint_dim`).
    pub fn merge(&self, comps: &[ComponentEmbeddings<T>]) -> Tensor<T> {
        let rows: Vec<Vec<T>> = comps
            .iter()
            .map(|e| {
                Component::MERGE_ORDER
                    .iter()
                    .flat_map(|&c| e.get(c).iter().copied())
                    .collect()
            })
            .collect();
        let x = Tensor::from_rows(&rows);
        self.merge
            .apply(&self.store, &x)
            .l2_normalize_rows(T::from_f64(NORM_EPS))
    }

    pub fn encode_images(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        if features.cols() != self.config.image_dim {
            return Err(ModelError::FeatureLength {
                expected: self.config.image_dim,
                found: features.cols(),
            });
        }
        if !features.is_finite() {
            return Err(ModelError::NonFiniteFeature);
        }
        Ok(self
            .image
            .apply(&self.store, features)
            .l2_normalize_rows(T::from_f64(NORM_EPS)))
    }

    pub fn encode_image(&self, feature: &[T]) -> Result<Vec<T>, ModelError> {
        Ok(self
            .encode_images(&Tensor::row_vector(feature.to_vec()))?
            .into_data())
    }

    /// `(component embeddings, e_R)` for one recipe.
    pub fn encode_recipe_embedding(
        &self,
        recipe: &TokenizedRecipe,
    ) -> Result<(ComponentEmbeddings<T>, Vec<T>), ModelError> {
        let comps = self.embed_components(&[recipe])?.remove(0);
        let joint = self.merge(std::slice::from_ref(&comps)).into_data();
        Ok((comps, joint))
    }

    /// Tape-free `g_{source -> target}(e)`.
    pub fn project(&self, target: Component, source: Component, e: &[T]) -> Vec<T> {
        if self.config.identity_heads {
            return e.to_vec();
        }
        self.head(target, source)
            .apply(&self.store, &Tensor::row_vector(e.to_vec()))
            .into_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize_sentence, Vocabulary};
    use crate::encoders::ComponentFlags;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            layers: 1,
            ff_width: 16,
            joint_dim: 6,
            image_dim: 5,
            max_sentence_len: 6,
            max_sentences: 4,
            ..ModelConfig::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens("a b c d e f g h".split(' ').map(String::from))
    }

    fn recipe(
        v: &Vocabulary,
        id: &str,
        title: &str,
        ing: &[&str],
        ins: &[&str],
    ) -> TokenizedRecipe {
        let t = |s: &str| tokenize_sentence(v, s, 6);
        TokenizedRecipe {
            id: id.into(),
            title: t(title),
            ingredients: ing.iter().map(|s| t(s)).collect(),
            instructions: ins.iter().map(|s| t(s)).collect(),
            image_feature: None,
        }
    }

    #[test]
    fn canonical_names_are_unique_and_stable() {
        let m = ModelParams::<f32>::new(tiny(), 10, 1).unwrap();
        let names: Vec<&str> = m.tensors().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"heads.ing_to_ttl.weight"));
        assert!(names.contains(&"ingredients.list.layers.0.attention.query.weight"));
        assert!(names.contains(&"empty.instructions"));
        assert_eq!(
            m.store().get(m.store().id("merge.weight").unwrap()).shape(),
            &[24, 6]
        );
    }

    #[test]
    fn output_shapes_and_norms() {
        let v = vocab();
        let m = ModelParams::<f64>::new(tiny(), v.len(), 3).unwrap();
        let r = recipe(&v, "x", "a b", &["c d", "e"], &["f g h", "a", "b c"]);
        let (comps, joint) = m.encode_recipe_embedding(&r).unwrap();
        assert!(comps.vectors.iter().all(|c| c.len() == 8));
        assert_eq!(joint.len(), 6);
        let n: f64 = joint.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn empty_title_uses_learned_vector() {
        let v = vocab();
        let m = ModelParams::<f32>::new(tiny(), v.len(), 3).unwrap();
        let r = recipe(&v, "x", "", &["c d"], &["e"]);
        let (comps, _) = m.encode_recipe_embedding(&r).unwrap();
        assert_eq!(
            comps.get(Component::Title),
            m.empty_vector(Component::Title)
        );
        assert!(!comps.present.contains(Component::Title));
    }

    #[test]
    fn disabled_component_is_replaced() {
        let v = vocab();
        let cfg = ModelConfig {
            components: ComponentFlags {
                title: false,
                ..ComponentFlags::default()
            },
            ..tiny()
        };
        let m = ModelParams::<f32>::new(cfg, v.len(), 3).unwrap();
        let r = recipe(&v, "x", "a b", &["c d"], &["e"]);
        let (comps, _) = m.encode_recipe_embedding(&r).unwrap();
        assert_eq!(
            comps.get(Component::Title),
            m.empty_vector(Component::Title)
        );
    }

    #[test]
    fn all_empty_recipe_is_rejected() {
        let v = vocab();
        let m = ModelParams::<f32>::new(tiny(), v.len(), 3).unwrap();
        let r = recipe(&v, "x", "", &[], &[]);
        assert_eq!(
            m.encode_recipe_embedding(&r).unwrap_err(),
            ModelError::EmptyRecipe("x".into())
        );
    }

    #[test]
    fn image_projection() {
        let m = ModelParams::<f64>::new(tiny(), 10, 3).unwrap();
        let e = m.encode_image(&[0.1, -0.4, 0.3, 0.0, 2.0]).unwrap();
        assert_eq!(e.len(), 6);
        let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        // zero feature: normalized bias, which is zero at init, stays finite
        let z = m.encode_image(&[0.0; 5]).unwrap();
        assert!(z.iter().all(|x| x.is_finite()));
        assert_eq!(
            m.encode_image(&[1.0; 4]).unwrap_err(),
            ModelError::FeatureLength {
                expected: 5,
                found: 4
            }
        );
    }

    #[test]
    fn tape_and_plain_merge_agree_bitwise() {
        let v = vocab();
        let m = ModelParams::<f32>::new(tiny(), v.len(), 9).unwrap();
        let rs = [
            recipe(&v, "x", "a b", &["c d"], &["e"]),
            recipe(&v, "y", "", &["h"], &["a b c", "d"]),
        ];
        let refs: Vec<&TokenizedRecipe> = rs.iter().collect();
        let mut tape = Tape::new();
        let vars = m.forward_recipes(&mut tape, &refs, None).unwrap();
        let comps = m.embed_components(&refs).unwrap();
        assert_eq!(tape.value(vars.recipe), &m.merge(&comps));
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let m = ModelParams::<f32>::new(tiny(), 10, 3).unwrap();
        let map: BTreeMap<String, Tensor<f32>> = m
            .tensors()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let back = ModelParams::from_tensors(tiny(), 10, map.clone()).unwrap();
        assert!(back.tensors().zip(m.tensors()).all(|(a, b)| a == b));
        assert!(matches!(
            ModelParams::from_tensors(tiny(), 11, map.clone()),
            Err(ModelError::ShapeMismatch { .. })
        ));
        let mut missing = map;
        missing.remove("merge.bias");
        assert_eq!(
            ModelParams::from_tensors(tiny(), 10, missing).unwrap_err(),
            ModelError::MissingTensor("merge.bias".into())
        );
    }
}
