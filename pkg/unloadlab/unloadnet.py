"""
Cycle-consistent graph attention surrogate for ventricular unloading.

A shared encoder (input lift, residual graph attention layers, mesh
pooling with single-key cross-attention, and cross-attention fusion of
the physiological parameters) feeds two displacement decoders: one maps
the end-diastolic mesh to the unloaded mesh, the other maps the
predicted unloaded mesh back to end-diastole.
"""
from collections import OrderedDict

import numpy as np

from logbook import Logger
log = Logger('unloadlab.unloadnet')

from unloadlab import gradkernel as gk
from unloadlab import meshcore, records
from unloadlab.errors import (ConfigError, IsolatedNode, NonFiniteActivation,
                              ShapeMismatch, UnknownVariant)

GAT, GCN = 'GAT', 'GCN'
MEAN, MAX, NONE = 'MEAN', 'MAX', 'NONE'
CROSS_ATTENTION, CONCAT = 'CROSS_ATTENTION', 'CONCAT'
E_TO_U, U_TO_E = 'e_to_u', 'u_to_e'
N_GLOBALS = 4

class ModelConfig(object):
    """
    hidden - width d of node features
    heads - attention heads M (d must be divisible by M)
    gat_layers - residual graph convolution layers
    dropout - drop probability applied to the fused features before decoding
    lambda_cycle - weight of the ED reconstruction term
    conv - GAT or GCN
    pooling - MEAN, MAX or NONE (no mesh-level context)
    fusion - CROSS_ATTENTION or CONCAT
    dual_input - feed globals through their own encoder; when off they are
        appended to every node's coordinates
    cycle - run the second (u -> ED) pass
    decoder_hidden - decoder width, None for d
    self_loops - include i in its own neighborhood
    leaky_slope - negative slope of the attention LeakyReLU
    """
    def __init__(self, hidden=128, heads=4, gat_layers=3, dropout=0.1, lambda_cycle=0.2,
                 conv=GAT, pooling=MEAN, fusion=CROSS_ATTENTION, dual_input=True,
                 cycle=True, decoder_hidden=None, self_loops=True, leaky_slope=0.2):
        self.hidden = int(hidden)
        self.heads = int(heads)
        self.gat_layers = int(gat_layers)
        self.dropout = float(dropout)
        self.lambda_cycle = float(lambda_cycle)
        self.conv = str(conv).upper()
        self.pooling = str(pooling).upper()
        self.fusion = str(fusion).upper()
        self.dual_input = bool(dual_input)
        self.cycle = bool(cycle)
        self.decoder_hidden = self.hidden if decoder_hidden is None else int(decoder_hidden)
        self.self_loops = bool(self_loops)
        self.leaky_slope = float(leaky_slope)
        self.validate()

    @property
    def head_dim(self):
        return self.hidden//self.heads

    def validate(self):
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError('hidden ({}) must be a positive multiple of heads ({})'.format(
                self.hidden, self.heads))
        if not 0. <= self.dropout < 1.:
            raise ConfigError('dropout must be in [0, 1), got {}'.format(self.dropout))
        if self.lambda_cycle < 0.:
            raise ConfigError('lambda_cycle must be >= 0, got {}'.format(self.lambda_cycle))
        if self.gat_layers < 1 or self.decoder_hidden < 1:
            raise ConfigError('Need at least one graph layer and a positive decoder width')
        if self.conv not in (GAT, GCN):
            raise ConfigError('conv must be GAT or GCN, got {}'.format(self.conv))
        if self.pooling not in (MEAN, MAX, NONE):
            raise ConfigError('pooling must be MEAN, MAX or NONE, got {}'.format(self.pooling))
        if self.fusion not in (CROSS_ATTENTION, CONCAT):
            raise ConfigError('fusion must be CROSS_ATTENTION or CONCAT, got {}'.format(
                self.fusion))

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)

    def to_dict(self):
        return OrderedDict([('hidden', self.hidden), ('heads', self.heads),
                            ('gat_layers', self.gat_layers), ('dropout', self.dropout),
                            ('lambda_cycle', self.lambda_cycle), ('conv', self.conv),
                            ('pooling', self.pooling), ('fusion', self.fusion),
                            ('dual_input', self.dual_input), ('cycle', self.cycle),
                            ('decoder_hidden', self.decoder_hidden),
                            ('self_loops', self.self_loops),
                            ('leaky_slope', self.leaky_slope)])

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self.__eq__(other)

    def __repr__(self):
        return 'ModelConfig({})'.format(', '.join('{}={}'.format(k, v)
                                                 for k, v in self.to_dict().items()))

#Stepwise ablation ladder; each rung keeps the changes of the previous one
VARIANTS = OrderedDict([
    ('A0', {}),
    ('A1', {'cycle': False}),
    ('A2', {'cycle': False, 'fusion': CONCAT}),
    ('A3', {'cycle': False, 'fusion': CONCAT, 'pooling': NONE}),
    ('A4', {'cycle': False, 'fusion': CONCAT, 'pooling': NONE, 'conv': GCN}),
    ('A5', {'cycle': False, 'fusion': CONCAT, 'pooling': NONE, 'conv': GCN,
            'dual_input': False}),
    ('C6', {'pooling': MAX}),
])

def variant_config(name, base=None):
    """ModelConfig of a named ablation variant derived from base (A0)"""
    if name not in VARIANTS:
        raise UnknownVariant('Unknown variant {} (choose from {})'.format(
            name, ', '.join(VARIANTS)))
    base = ModelConfig() if base is None else base
    return base.replace(**VARIANTS[name])

class Graph(object):
    """
    Directed edge list (src -> dst) of one graph or a disjoint union

    graph_ids - (n,) graph index of each node
    """
    def __init__(self, src, dst, n_nodes, graph_ids=None, n_graphs=1):
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.n_nodes = int(n_nodes)
        self.graph_ids = (np.zeros(self.n_nodes, dtype=np.int64) if graph_ids is None
                          else np.asarray(graph_ids, dtype=np.int64))
        self.n_graphs = int(n_graphs)

    @property
    def n_edges(self):
        return self.src.size

    def in_degree(self):
        return np.bincount(self.dst, minlength=self.n_nodes)

    def nodes_per_graph(self):
        return np.bincount(self.graph_ids, minlength=self.n_graphs)

def graph_from_edges(edges, n_nodes, self_loops=True):
    """
    Symmetric message graph from undirected (E,2) edges

    Without self-loops every node must have at least one neighbor.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src = [edges[:, 0], edges[:, 1]]
    dst = [edges[:, 1], edges[:, 0]]
    if self_loops:
        loops = np.arange(n_nodes)
        src.append(loops)
        dst.append(loops)
    graph = Graph(np.concatenate(src), np.concatenate(dst), n_nodes)
    lonely = np.flatnonzero(graph.in_degree() == 0)
    if lonely.size:
        raise IsolatedNode('{} nodes have an empty neighborhood (first: {})'.format(
            lonely.size, lonely[:5].tolist()))
    return graph

def mesh_graph(mesh, self_loops=True):
    """Message graph on the tet 1-skeleton"""
    return graph_from_edges(mesh.edges(), mesh.n_nodes, self_loops)

def batch_graphs(graphs):
    """Disjoint union; node and graph indices are offset in order"""
    offsets = np.concatenate([[0], np.cumsum([g.n_nodes for g in graphs])])
    src = np.concatenate([g.src+o for g, o in zip(graphs, offsets)])
    dst = np.concatenate([g.dst+o for g, o in zip(graphs, offsets)])
    gid = np.concatenate([np.full(g.n_nodes, i, dtype=np.int64) for i, g in enumerate(graphs)])
    return Graph(src, dst, offsets[-1], gid, len(graphs))

class Sample(object):
    """
    Network input for one case in normalized coordinates

    coords_ed - (n,3) normalized ED nodes
    globals_norm - (4,) normalized (P, C, theta_endo, theta_epi)
    coords_u - (n,3) normalized unloaded nodes (same transform) or None
    transform - NormalizationTransform of the ED mesh
    """
    def __init__(self, coords_ed, globals_norm, graph, transform, coords_u=None,
                 case_id=None):
        self.coords_ed = np.asarray(coords_ed, dtype=np.float64)
        self.globals_norm = np.asarray(globals_norm, dtype=np.float64).reshape(N_GLOBALS)
        self.graph = graph
        self.transform = transform
        self.coords_u = None if coords_u is None else np.asarray(coords_u, dtype=np.float64)
        self.case_id = case_id

def prepare_sample(mesh_ed, globals_norm, mesh_u=None, self_loops=True, case_id=None):
    """Normalize the ED mesh and express the unloaded target in the same frame"""
    normalized, transform = meshcore.normalize_coords(mesh_ed)
    coords_u = None
    if mesh_u is not None:
        if mesh_u.n_nodes != mesh_ed.n_nodes:
            raise ShapeMismatch('Unloaded mesh has {} nodes, ED mesh {}'.format(
                mesh_u.n_nodes, mesh_ed.n_nodes))
        coords_u = transform.apply(mesh_u.nodes)
    return Sample(normalized.nodes, globals_norm, mesh_graph(mesh_ed, self_loops),
                  transform, coords_u, case_id)

class Batch(object):
    """Disjoint union of samples"""
    def __init__(self, samples):
        self.samples = list(samples)
        self.graph = batch_graphs([s.graph for s in self.samples])
        self.coords_ed = np.concatenate([s.coords_ed for s in self.samples])
        self.globals_norm = np.stack([s.globals_norm for s in self.samples])
        self.has_targets = all(s.coords_u is not None for s in self.samples)
        self.coords_u = (np.concatenate([s.coords_u for s in self.samples])
                         if self.has_targets else None)
        self.offsets = np.concatenate([[0], np.cumsum([s.coords_ed.shape[0]
                                                       for s in self.samples])])

    def split(self, values):
        """Per-sample rows of a stacked (n,3) array"""
        return [values[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

def _glorot(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6./(fan_in+fan_out))
    return rng.uniform(-limit, limit, size=shape)

def init_params(config, seed=0):
    """
    Learnable arrays keyed by name, Glorot-uniform weights, zero biases,
    unit layer-norm gains

    RETURNS
    -------
        OrderedDict of np.ndarray
    """
    rng = np.random.default_rng(seed)
    d, M, dm, dh = config.hidden, config.heads, config.head_dim, config.decoder_hidden
    p = OrderedDict()
    n_in = 3 if config.dual_input else 3+N_GLOBALS
    p['lift_W'] = _glorot(rng, (n_in, d))
    p['lift_b'] = np.zeros(d)
    for l in range(config.gat_layers):
        p['conv{}_W'.format(l)] = _glorot(rng, (d, d))
        if config.conv == GAT:
            p['conv{}_a_src'.format(l)] = _glorot(rng, (M, dm))
            p['conv{}_a_dst'.format(l)] = _glorot(rng, (M, dm))
    if config.pooling != NONE:
        for name in ('Wq', 'Wk', 'Wv'):
            p['mesh_attn_'+name] = _glorot(rng, (d, d))
    p['ln1_gain'] = np.ones(d)
    p['ln1_bias'] = np.zeros(d)
    if config.dual_input:
        p['glob_W1'] = _glorot(rng, (N_GLOBALS, d))
        p['glob_b1'] = np.zeros(d)
        p['glob_W2'] = _glorot(rng, (d, d))
        p['glob_b2'] = np.zeros(d)
        if config.fusion == CROSS_ATTENTION:
            for name in ('Wq', 'Wk', 'Wv'):
                p['fusion_attn_'+name] = _glorot(rng, (d, d))
        else:
            p['fusion_W'] = _glorot(rng, (2*d, d))
            p['fusion_b'] = np.zeros(d)
        p['ln2_gain'] = np.ones(d)
        p['ln2_bias'] = np.zeros(d)
    for direction in (E_TO_U, U_TO_E):
        p['dec_{}_W1'.format(direction)] = _glorot(rng, (d, dh))
        p['dec_{}_b1'.format(direction)] = np.zeros(dh)
        p['dec_{}_W2'.format(direction)] = _glorot(rng, (dh, 3))
        p['dec_{}_b2'.format(direction)] = np.zeros(3)
    return p

def gat_layer(H, graph, W, a_src, a_dst, heads, slope=0.2, trace=None):
    """
    One residual multi-head graph attention layer

    H - (n,d) DiffArray; W - (d,d); a_src, a_dst - (M, d/M)
    Attention logits are LeakyReLU(a_dst.Wh_i + a_src.Wh_j) for edge j -> i,
    normalized over the incoming edges of i.
    """
    n, d = H.shape
    dm = d//heads
    Wh = gk.reshape(gk.matmul(H, W), (n, heads, dm))
    s_src = gk.sum(Wh*a_src, axis=2)
    s_dst = gk.sum(Wh*a_dst, axis=2)
    logits = gk.leaky_relu(gk.gather(s_dst, graph.dst)+gk.gather(s_src, graph.src), slope)
    #Per-destination shift; constant so the softmax and its gradient are unchanged
    shift = np.full((n, heads), -np.inf)
    np.maximum.at(shift, graph.dst, logits.values)
    weights = gk.exp(logits-shift[graph.dst])
    denom = gk.segment_sum(weights, graph.dst, n)
    alpha = weights/gk.gather(denom, graph.dst)
    if trace is not None:
        trace.setdefault('alpha', []).append(alpha.values)
    messages = gk.gather(Wh, graph.src)*gk.reshape(alpha, (graph.n_edges, heads, 1))
    agg = gk.reshape(gk.segment_sum(messages, graph.dst, n), (n, d))
    return gk.relu(agg)+H

def gcn_layer(H, graph, W):
    """Residual graph convolution with symmetric degree normalization"""
    n, d = H.shape
    deg = graph.in_degree().astype(np.float64)
    norm = 1./np.sqrt(deg[graph.src]*deg[graph.dst])
    HW = gk.matmul(H, W)
    messages = gk.gather(HW, graph.src)*norm[:, None]
    return gk.relu(gk.segment_sum(messages, graph.dst, n))+H

def single_key_attention(Q_in, kv_in, graph_ids, Wq, Wk, Wv, heads, trace=None, key=None):
    """
    Multi-head attention of every node (query) over its graph's single
    context token (key and value)

    Q_in - (n,d) queries; kv_in - (G,d) one context row per graph
    """
    n, d = Q_in.shape
    dm = d//heads
    Q = gk.reshape(gk.matmul(Q_in, Wq), (n, heads, dm))
    K = gk.reshape(gk.gather(gk.matmul(kv_in, Wk), graph_ids), (n, heads, dm))
    V = gk.reshape(gk.gather(gk.matmul(kv_in, Wv), graph_ids), (n, heads, dm))
    scores = gk.sum(Q*K, axis=2, keepdims=True)*(1./np.sqrt(dm))
    attn = gk.softmax(scores, axis=2)
    if trace is not None and key is not None:
        trace[key] = attn.values
    return gk.reshape(attn*V, (n, d))

def encode(coords, globals_norm, graph, params, config, training=False, rng=None,
           trace=None):
    """
    Fused node embedding Z (n,d)

    INPUTS
    ------
        coords - (n,3) DiffArray of normalized node coordinates
        globals_norm - (G,4) normalized physiological parameters per graph
        graph - Graph (possibly a batch)
        params - dict of DiffArray leaves keyed as in init_params
        trace - optional dict receiving attention weights
    """
    tape = coords.tape
    gid = graph.graph_ids
    glob = tape.constant(globals_norm)
    if config.dual_input:
        X = coords
    else:
        X = gk.concat([coords, gk.gather(glob, gid)], axis=1)
    H = gk.matmul(X, params['lift_W'])+params['lift_b']
    for l in range(config.gat_layers):
        if config.conv == GAT:
            H = gat_layer(H, graph, params['conv{}_W'.format(l)],
                          params['conv{}_a_src'.format(l)], params['conv{}_a_dst'.format(l)],
                          config.heads, config.leaky_slope, trace)
        else:
            H = gcn_layer(H, graph, params['conv{}_W'.format(l)])

    if config.pooling == NONE:
        Z_mesh = gk.layer_norm(H, params['ln1_gain'], params['ln1_bias'])
    else:
        if config.pooling == MEAN:
            g_mesh = gk.segment_mean(H, gid, graph.n_graphs)
        else:
            g_mesh = gk.segment_max(H, gid, graph.n_graphs)
        if trace is not None:
            trace['g_mesh'] = g_mesh.values
        context = single_key_attention(H, g_mesh, gid, params['mesh_attn_Wq'],
                                       params['mesh_attn_Wk'], params['mesh_attn_Wv'],
                                       config.heads, trace, 'mesh_attention')
        Z_mesh = gk.layer_norm(H+context, params['ln1_gain'], params['ln1_bias'])

    if not config.dual_input:
        Z = Z_mesh
    else:
        g_global = gk.matmul(gk.relu(gk.matmul(glob, params['glob_W1'])+params['glob_b1']),
                             params['glob_W2'])+params['glob_b2']
        if config.fusion == CROSS_ATTENTION:
            fused = single_key_attention(Z_mesh, g_global, gid, params['fusion_attn_Wq'],
                                         params['fusion_attn_Wk'], params['fusion_attn_Wv'],
                                         config.heads, trace, 'fusion_attention')
            Z = gk.layer_norm(Z_mesh+fused, params['ln2_gain'], params['ln2_bias'])
        else:
            joined = gk.concat([Z_mesh, gk.gather(g_global, gid)], axis=1)
            Z = gk.layer_norm(gk.matmul(joined, params['fusion_W'])+params['fusion_b'],
                              params['ln2_gain'], params['ln2_bias'])
    if not Z.is_finite():
        raise NonFiniteActivation('Encoder produced non-finite activations')
    return Z

def decode(Z, direction, params, config, training=False, rng=None):
    """Row-wise two-layer MLP from fused features to (n,3) displacements"""
    if direction not in (E_TO_U, U_TO_E):
        raise ConfigError('Unknown decoder direction {}'.format(direction))
    Z = gk.dropout(Z, config.dropout, rng, training)
    hidden = gk.relu(gk.matmul(Z, params['dec_{}_W1'.format(direction)])
                     +params['dec_{}_b1'.format(direction)])
    out = gk.matmul(hidden, params['dec_{}_W2'.format(direction)])+params['dec_{}_b2'.format(direction)]
    if not out.is_finite():
        raise NonFiniteActivation('Decoder {} produced non-finite displacements'.format(direction))
    return out

class CycleOutput(object):
    def __init__(self, pred_u, disp_e2u, pred_ed=None, disp_u2e=None, trace=None):
        self.pred_u = pred_u
        self.disp_e2u = disp_e2u
        self.pred_ed = pred_ed
        self.disp_u2e = disp_u2e
        self.trace = trace

def forward_cycle(coords_ed, globals_norm, graph, params, config, training=False, rng=None,
                  trace=None):
    """
    ED -> unloaded prediction, then (when config.cycle) unloaded -> ED
    reconstruction with gradients flowing through the intermediate mesh
    """
    Z = encode(coords_ed, globals_norm, graph, params, config, training, rng, trace)
    disp_e2u = decode(Z, E_TO_U, params, config, training, rng)
    pred_u = coords_ed+disp_e2u
    if not config.cycle:
        return CycleOutput(pred_u, disp_e2u, trace=trace)
    Z2 = encode(pred_u, globals_norm, graph, params, config, training, rng)
    disp_u2e = decode(Z2, U_TO_E, params, config, training, rng)
    return CycleOutput(pred_u, disp_e2u, pred_u+disp_u2e, disp_u2e, trace)

def _per_graph_mse(pred, truth, graph):
    if pred.shape != truth.shape:
        raise ShapeMismatch('Prediction {} and target {} differ in shape'.format(
            pred.shape, truth.shape))
    diff = pred-truth
    per_node = gk.sum(diff*diff, axis=1)
    counts = 3.*graph.nodes_per_graph()
    per_graph = gk.segment_sum(per_node, graph.graph_ids, graph.n_graphs)/counts
    return gk.mean(per_graph)

def loss(pred_u, true_u, pred_ed, true_ed, lambda_cycle, graph=None):
    """
    Mean squared node error of the unloaded prediction plus lambda_cycle
    times that of the reconstructed ED mesh (means over n*3 entries per
    graph, averaged over graphs); pred_ed None drops the second term
    """
    tape = pred_u.tape
    true_u = gk._lift(true_u, tape)
    if graph is None:
        graph = Graph([], [], pred_u.shape[0])
    total = _per_graph_mse(pred_u, true_u, graph)
    if pred_ed is not None and lambda_cycle > 0.:
        total = total+lambda_cycle*_per_graph_mse(pred_ed, gk._lift(true_ed, tape), graph)
    return total

class UnloadNet(object):
    """
    Model state: configuration, learnable arrays (numpy, float64) and the
    (min, max) bounds used to normalize the physiological parameters
    """
    def __init__(self, config=None, params=None, seed=0, bounds=None):
        self.config = ModelConfig() if config is None else config
        self.seed = seed
        self.bounds = OrderedDict(records.DEFAULT_BOUNDS if bounds is None else bounds)
        self.params = init_params(self.config, seed) if params is None else OrderedDict(params)
        self.check_params()

    def check_params(self):
        reference = init_params(self.config, 0)
        if list(reference) != list(self.params):
            raise ShapeMismatch('Parameter names do not match the configuration')
        for name, arr in reference.items():
            if self.params[name].shape != arr.shape:
                raise ShapeMismatch('Parameter {} has shape {}, expected {}'.format(
                    name, self.params[name].shape, arr.shape))
            if not np.all(np.isfinite(self.params[name])):
                raise NonFiniteActivation('Parameter {} is not finite'.format(name))

    def n_parameters(self):
        return int(np.sum([p.size for p in self.params.values()]))

    def leaves(self, tape, requires_grad=True):
        return OrderedDict((name, tape.leaf(arr, requires_grad, name=name))
                           for name, arr in self.params.items())

    def forward(self, batch, training=False, rng=None, trace=None):
        """
        Record one forward pass on a new tape

        RETURNS
        -------
            tape, leaves, CycleOutput, loss DiffArray (None without targets)
        """
        tape = gk.Tape()
        leaves = self.leaves(tape, requires_grad=training)
        coords = tape.constant(batch.coords_ed)
        out = forward_cycle(coords, batch.globals_norm, batch.graph, leaves, self.config,
                            training, rng, trace)
        total = None
        if batch.has_targets:
            total = loss(out.pred_u, batch.coords_u, out.pred_ed, batch.coords_ed,
                         self.config.lambda_cycle, batch.graph)
        return tape, leaves, out, total

    def predict_coords(self, sample):
        """Unloaded node coordinates (cm) for one sample, evaluation mode"""
        _, _, out, _ = self.forward(Batch([sample]), training=False)
        return sample.transform.invert(out.pred_u.values)

    def normalize_globals(self, params):
        return params.normalized(self.bounds)

    def sample(self, mesh_ed, params, mesh_u=None, case_id=None):
        """Sample for a case given its ED mesh and GlobalParams"""
        return prepare_sample(mesh_ed, self.normalize_globals(params), mesh_u,
                              self.config.self_loops, case_id)

    def predict_mesh(self, mesh_ed, params):
        """Unloaded TetMesh predicted from an ED mesh and its GlobalParams"""
        sample = self.sample(mesh_ed, params)
        return mesh_ed.with_nodes(self.predict_coords(sample), validate=False)
