use freezetune::autograd::ActivationKind;
use freezetune::model::{load_checkpoint, save_checkpoint, LayerRole, NormPlacement};
use freezetune::{Batch, Codec, CodecConfig, Error, Graph, Model, ModelConfig};
use proptest::prelude::*;

fn tiny(norm: NormPlacement) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        max_seq_len: 4,
        vocab: 10,
        num_classes: 3,
        norm,
        ..ModelConfig::default()
    }
}

fn batch() -> Batch {
    Batch::new(vec![1, 2, 3, 4, 5, 6, 7, 8], 2, 4, vec![0, 2]).unwrap()
}

fn logits(model: &Model, batch: &Batch, codecs: &CodecConfig) -> Vec<f32> {
    let mut g = Graph::new();
    let y = model.forward(&mut g, batch, codecs).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn bert_base_registry_has_102_entries() {
    let config = ModelConfig::bert_base();
    assert_eq!(config.num_layers(), 102);
    let reg = freezetune::LayerRegistry::new(&config);
    assert_eq!(reg.len(), 102);
    let names: Vec<&str> = reg.entries().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names[0], "embeddings.word_embeddings");
    assert_eq!(names[3], "embeddings.LayerNorm");
    assert_eq!(names[4], "encoder.layer.0.attention.self.query");
    assert_eq!(names[11], "encoder.layer.0.output.LayerNorm");
    assert_eq!(names[99], "encoder.layer.11.output.LayerNorm");
    assert_eq!(names[100], "pooler.dense");
    assert_eq!(names[101], "classifier");
    assert!(reg.entries().iter().enumerate().all(|(i, e)| e.id == i));
}

#[test]
fn small_model_runs_forward() {
    let config = ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        max_seq_len: 4,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(config.clone(), 0).unwrap();
    let b = Batch::new(vec![0, 1, 2, 3, 3, 2, 1, 0], 2, 4, vec![0, 1]).unwrap();
    let mut g = Graph::new();
    let y = model.forward(&mut g, &b, &CodecConfig::off()).unwrap();
    assert_eq!(g.value(y).shape(), &[2, config.num_classes]);
}

#[test]
fn indivisible_heads_rejected() {
    let config = ModelConfig {
        hidden: 10,
        heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(
        Model::<f32>::new(config, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn oversize_sequence_rejected() {
    let model = Model::<f32>::new(tiny(NormPlacement::Post), 0).unwrap();
    let b = Batch::new(vec![0; 10], 2, 5, vec![0, 0]).unwrap();
    let mut g = Graph::new();
    assert!(matches!(
        model.forward(&mut g, &b, &CodecConfig::off()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn identical_rows_give_identical_logits() {
    let model = Model::<f32>::new(tiny(NormPlacement::Post), 3).unwrap();
    let b = Batch::new(vec![4, 1, 9, 2, 4, 1, 9, 2], 2, 4, vec![0, 0]).unwrap();
    let y = logits(&model, &b, &CodecConfig::off());
    assert_eq!(y[..3], y[3..]);
}

#[test]
fn zero_classifier_is_uniform() {
    let mut model = Model::<f32>::new(tiny(NormPlacement::Post), 3).unwrap();
    let id = model.registry().id_of(LayerRole::Classifier, None).unwrap();
    for pid in model.params.of_layer(id).collect::<Vec<_>>() {
        model.params.get_mut(pid).tensor.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let (_, loss) = model
        .forward_loss(&mut g, &batch(), &CodecConfig::off())
        .unwrap();
    let uniform = (3f32).ln();
    assert!((g.value(loss).item().unwrap() - uniform).abs() < 1e-6);
}

#[test]
fn freeze_set_is_exact() {
    let mut model = Model::<f32>::new(tiny(NormPlacement::Post), 0).unwrap();
    model.freeze_set(&[5, 1, 7]).unwrap();
    assert_eq!(model.frozen_layers(), vec![1, 5, 7]);
    model.freeze_set(&[2]).unwrap();
    assert_eq!(model.frozen_layers(), vec![2]);
    for (_, p) in model.params.iter() {
        assert_eq!(p.update_enabled, p.layer_id != 2);
    }
    let n = model.num_layers();
    assert_eq!(model.freeze_set(&[n]), Err(Error::UnknownLayer(n)));
}

#[test]
fn every_parameter_maps_to_one_registry_entry() {
    let model = Model::<f32>::new(tiny(NormPlacement::Post), 0).unwrap();
    let mut owned = vec![0; model.num_layers()];
    for (_, p) in model.params.iter() {
        let entry = model.registry().get(p.layer_id).expect("registered layer");
        assert!(p.name.starts_with(&entry.name));
        owned[p.layer_id] += 1;
    }
    assert!(owned.iter().all(|&c| c >= 1));
}

#[test]
fn frozen_norm_takes_pruned_path() {
    let mut model = Model::<f32>::new(tiny(NormPlacement::Post), 0).unwrap();
    let ln = model
        .registry()
        .find("encoder.layer.0.attention.output.LayerNorm")
        .unwrap();
    let codecs = CodecConfig::all_on();
    let saved = |model: &Model| {
        let mut g = Graph::new();
        model.forward(&mut g, &batch(), &codecs).unwrap();
        g.cache_records()
            .into_iter()
            .find(|r| r.name == "encoder.layer.0.attention.output.LayerNorm:normed")
            .unwrap()
    };
    let active = saved(&model);
    assert_eq!(active.kind, ActivationKind::SemiStatic);
    assert_eq!(active.bytes, 4 * active.elements as u64);
    model.freeze_set(&[ln]).unwrap();
    let frozen = saved(&model);
    assert_eq!(frozen.bytes, Codec::prune(0.1).bytes_for(frozen.elements));
    assert!(frozen.bytes < active.bytes);
}

#[test]
fn forward_ignores_freezing_and_codecs() {
    for norm in [NormPlacement::Post, NormPlacement::Pre] {
        let mut model = Model::<f32>::new(tiny(norm), 5).unwrap();
        let base = logits(&model, &batch(), &CodecConfig::off());
        assert_eq!(base, logits(&model, &batch(), &CodecConfig::all_on()));
        let half: Vec<usize> = (0..model.num_layers()).step_by(2).collect();
        model.freeze_set(&half).unwrap();
        assert_eq!(base, logits(&model, &batch(), &CodecConfig::all_on()));
    }
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(tiny(NormPlacement::Pre), 11).unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let back: Model<f32> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config(), model.config());
    for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
}

#[test]
fn corrupt_manifest_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(tiny(NormPlacement::Post), 1).unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let path = dir.path().join(freezetune::model::CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[4] = "no.such.param 1x1 0";
    std::fs::write(&path, lines.join("\n")).unwrap();
    let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
    assert!(err.to_string().contains("line 5"), "{err}");
}

/// Loss bits and per-parameter gradients with `frozen` disabled.
fn grads(model: &mut Model, frozen: &[usize]) -> (u32, Vec<Option<Vec<f32>>>) {
    model.freeze_set(frozen).unwrap();
    model.params.zero_grad();
    let mut g = Graph::new();
    let (_, loss) = model
        .forward_loss(&mut g, &batch(), &CodecConfig::off())
        .unwrap();
    let bits = g.value(loss).item().unwrap().to_bits();
    g.backward(loss, &mut model.params).unwrap();
    let out = model
        .params
        .iter()
        .map(|(_, p)| p.tensor.grad().map(<[f32]>::to_vec))
        .collect();
    (bits, out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn freezing_keeps_surviving_grads_bitwise(mask in proptest::collection::vec(any::<bool>(), 20)) {
        let mut model = Model::<f32>::new(tiny(NormPlacement::Post), 9).unwrap();
        // Middle layers: everything between the first embedding and the classifier.
        let frozen: Vec<usize> = (1..21).filter(|&i| mask[i - 1]).collect();
        let (base_loss, base) = grads(&mut model, &[]);
        let (loss, got) = grads(&mut model, &frozen);
        prop_assert_eq!(base_loss, loss);
        for (i, (_, p)) in model.params.iter().enumerate() {
            if frozen.contains(&p.layer_id) {
                prop_assert!(got[i].is_none());
            } else {
                prop_assert_eq!(&base[i], &got[i], "{}", p.name);
            }
        }
    }
}
